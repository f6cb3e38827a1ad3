//! Canonical record schema: evaluation instances, candidate judgments,
//! score normalization, and the dataset registry.
//!
//! An instance is one evaluation task (input, description, model output,
//! criteria, optional reference, optional human score). A candidate
//! judgment is one machine-generated evaluation of it (analysis + score).
//! All scores are integers on a 1-5 scale after normalization; raw source
//! scales are declared per dataset in the registry.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conf::{Conf, ConfError};

/// Default registry shipped with the binary; see `data/registry.conf`.
pub const DEFAULT_REGISTRY_TEXT: &str = include_str!("../data/registry.conf");

pub const SCORE_MIN: i32 = 1;
pub const SCORE_MAX: i32 = 5;

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{field}`: `{value}` is not a valid {expected}")]
    BadEnum {
        field: String,
        value: String,
        expected: String,
    },
    #[error("field `{field}`: score {value} outside [{SCORE_MIN},{SCORE_MAX}]")]
    ScoreOutOfRange { field: String, value: i64 },
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("field `{field}`: {message}")]
    BadContent { field: String, message: String },
    #[error("raw score {raw} outside registered scale [{min},{max}]")]
    RawOutOfScale { raw: f64, min: f64, max: f64 },
    #[error(transparent)]
    Conf(#[from] ConfError),
}

/// Generation direction of the task under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    I2t,
    T2i,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::I2t => "i2t",
            Direction::T2i => "t2i",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "i2t" => Some(Direction::I2t),
            "t2i" => Some(Direction::T2i),
            _ => None,
        }
    }
}

/// The six task families covered by the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    ImageCaptioning,
    Vqa,
    T2iGeneration,
    TextReading,
    Reasoning,
    InstructionFollowing,
}

impl TaskType {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::ImageCaptioning => "image_captioning",
            TaskType::Vqa => "vqa",
            TaskType::T2iGeneration => "t2i_generation",
            TaskType::TextReading => "text_reading",
            TaskType::Reasoning => "reasoning",
            TaskType::InstructionFollowing => "instruction_following",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image_captioning" => Some(TaskType::ImageCaptioning),
            "vqa" => Some(TaskType::Vqa),
            "t2i_generation" => Some(TaskType::T2iGeneration),
            "text_reading" => Some(TaskType::TextReading),
            "reasoning" => Some(TaskType::Reasoning),
            "instruction_following" => Some(TaskType::InstructionFollowing),
            _ => None,
        }
    }

    pub fn all() -> [TaskType; 6] {
        [
            TaskType::ImageCaptioning,
            TaskType::Vqa,
            TaskType::T2iGeneration,
            TaskType::TextReading,
            TaskType::Reasoning,
            TaskType::InstructionFollowing,
        ]
    }
}

/// Who produced the reference judgments for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationSource {
    Human,
    Machine,
}

/// Text and/or media content. Media is referenced by URI only; bytes are
/// never loaded by the pipeline.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Content {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub media: Vec<String>,
}

impl Content {
    pub fn text(s: impl Into<String>) -> Self {
        Content {
            text: Some(s.into()),
            media: Vec::new(),
        }
    }

    pub fn media(uri: impl Into<String>) -> Self {
        Content {
            text: None,
            media: vec![uri.into()],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_none() && self.media.is_empty()
    }

    pub fn is_media_only(&self) -> bool {
        self.text.is_none() && !self.media.is_empty()
    }

    pub fn is_text_only(&self) -> bool {
        self.text.is_some() && self.media.is_empty()
    }
}

/// One evaluation task, already normalized to the 1-5 score scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub id: String,
    pub task_input: Content,
    pub task_description: String,
    pub model_output: Content,
    pub criteria: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Content>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_score: Option<i32>,
    pub direction: Direction,
    pub task_type: TaskType,
    pub source_dataset: String,
}

/// One machine-generated evaluation output for an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateJudgment {
    pub instance_id: String,
    pub candidate_index: u32,
    pub analysis: String,
    pub score: i32,
    pub annotator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Integer,
    Continuous,
}

/// Raw score scale of a source dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub min: f64,
    pub max: f64,
    pub kind: ScoreKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRegistryEntry {
    pub key: String,
    pub evaluation_source: EvaluationSource,
    pub task_type: TaskType,
    pub direction: Direction,
    pub score_scale: ScoreScale,
    pub expected_candidate_count: u32,
}

/// The dataset registry, keyed by dataset name.
#[derive(Debug, Clone)]
pub struct Registry {
    entries: BTreeMap<String, DatasetRegistryEntry>,
}

impl Registry {
    /// The registry shipped with the tool: the sixteen corpus datasets.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_REGISTRY_TEXT).expect("builtin registry is valid")
    }

    pub fn parse(text: &str) -> Result<Self, ValidateError> {
        let conf = Conf::parse(text)?;
        let mut entries = BTreeMap::new();
        for key in conf.section_names().map(str::to_string).collect::<Vec<_>>() {
            let source_raw = conf.require(&key, "evaluation_source")?;
            let evaluation_source = match source_raw {
                "human" => EvaluationSource::Human,
                "machine" => EvaluationSource::Machine,
                other => {
                    return Err(ValidateError::BadEnum {
                        field: format!("[{key}] evaluation_source"),
                        value: other.to_string(),
                        expected: "evaluation_source (human|machine)".to_string(),
                    })
                }
            };
            let task_raw = conf.require(&key, "task_type")?;
            let task_type = TaskType::parse(task_raw).ok_or_else(|| ValidateError::BadEnum {
                field: format!("[{key}] task_type"),
                value: task_raw.to_string(),
                expected: "task_type".to_string(),
            })?;
            let dir_raw = conf.require(&key, "direction")?;
            let direction = Direction::parse(dir_raw).ok_or_else(|| ValidateError::BadEnum {
                field: format!("[{key}] direction"),
                value: dir_raw.to_string(),
                expected: "direction (i2t|t2i)".to_string(),
            })?;
            let min: f64 = conf.parse_value(&key, "score_min")?;
            let max: f64 = conf.parse_value(&key, "score_max")?;
            if min.is_nan() || max.is_nan() || min >= max {
                return Err(ValidateError::BadContent {
                    field: format!("[{key}] score_min/score_max"),
                    message: format!("score_min ({min}) must be < score_max ({max})"),
                });
            }
            let kind_raw = conf.require(&key, "score_kind")?;
            let kind = match kind_raw {
                "integer" => ScoreKind::Integer,
                "continuous" => ScoreKind::Continuous,
                other => {
                    return Err(ValidateError::BadEnum {
                        field: format!("[{key}] score_kind"),
                        value: other.to_string(),
                        expected: "score_kind (integer|continuous)".to_string(),
                    })
                }
            };
            let candidates: u32 = match conf.get(&key, "candidates") {
                Some(_) => conf.parse_value(&key, "candidates")?,
                None => 10,
            };
            entries.insert(
                key.clone(),
                DatasetRegistryEntry {
                    key: key.clone(),
                    evaluation_source,
                    task_type,
                    direction,
                    score_scale: ScoreScale { min, max, kind },
                    expected_candidate_count: candidates,
                },
            );
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ValidateError> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            ValidateError::Conf(ConfError::Io {
                path: path.display().to_string(),
                source,
            })
        })?;
        Self::parse(&text)
    }

    pub fn lookup(&self, key: &str) -> Result<&DatasetRegistryEntry, ValidateError> {
        self.entries
            .get(key)
            .ok_or_else(|| ValidateError::UnknownDataset(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &DatasetRegistryEntry> {
        self.entries.values()
    }
}

/// Map a raw score on `scale` onto the integer 1-5 scale.
///
/// Linear map `raw -> 1 + 4*(raw-min)/(max-min)`, rounded half away from
/// zero, clamped to [1,5]. Monotone non-decreasing; endpoints map to 1 and 5.
pub fn normalize_score(raw: f64, scale: &ScoreScale) -> Result<i32, ValidateError> {
    if !(raw >= scale.min && raw <= scale.max) {
        return Err(ValidateError::RawOutOfScale {
            raw,
            min: scale.min,
            max: scale.max,
        });
    }
    let mapped = 1.0 + 4.0 * (raw - scale.min) / (scale.max - scale.min);
    // f64::round is round-half-away-from-zero
    let rounded = mapped.round() as i32;
    Ok(rounded.clamp(SCORE_MIN, SCORE_MAX))
}

fn get_str(
    record: &serde_json::Value,
    field: &str,
    required: bool,
) -> Result<Option<String>, ValidateError> {
    match record.get(field) {
        None | Some(serde_json::Value::Null) => {
            if required {
                Err(ValidateError::MissingField(field.to_string()))
            } else {
                Ok(None)
            }
        }
        Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Err(ValidateError::BadContent {
            field: field.to_string(),
            message: format!("expected string, got {other}"),
        }),
    }
}

fn get_content(
    record: &serde_json::Value,
    field: &str,
    required: bool,
) -> Result<Option<Content>, ValidateError> {
    match record.get(field) {
        None | Some(serde_json::Value::Null) => {
            if required {
                Err(ValidateError::MissingField(field.to_string()))
            } else {
                Ok(None)
            }
        }
        // bare strings are accepted as text content
        Some(serde_json::Value::String(s)) => Ok(Some(Content::text(s.clone()))),
        Some(value) => {
            let content: Content =
                serde_json::from_value(value.clone()).map_err(|e| ValidateError::BadContent {
                    field: field.to_string(),
                    message: e.to_string(),
                })?;
            if content.is_empty() && required {
                return Err(ValidateError::BadContent {
                    field: field.to_string(),
                    message: "content has neither text nor media".to_string(),
                });
            }
            Ok(Some(content))
        }
    }
}

/// Validate one raw JSON record into a schema-valid [`EvalInstance`].
///
/// Scores are expected to be already normalized to the 1-5 integer scale;
/// use [`normalize_score`] beforehand for raw source scales.
pub fn validate_instance(
    record: &serde_json::Value,
    registry: &Registry,
) -> Result<EvalInstance, ValidateError> {
    let id = get_str(record, "id", true)?.unwrap();
    let task_description = get_str(record, "task_description", true)?.unwrap();
    let criteria = get_str(record, "criteria", true)?.unwrap();
    let source_dataset = get_str(record, "source_dataset", true)?.unwrap();
    if !registry.contains(&source_dataset) {
        return Err(ValidateError::UnknownDataset(source_dataset));
    }

    let task_input = get_content(record, "task_input", true)?.unwrap();
    let model_output = get_content(record, "model_output", true)?.unwrap();
    let reference = get_content(record, "reference", false)?;

    let dir_raw = get_str(record, "direction", true)?.unwrap();
    let direction = Direction::parse(&dir_raw).ok_or_else(|| ValidateError::BadEnum {
        field: "direction".to_string(),
        value: dir_raw.clone(),
        expected: "direction (i2t|t2i)".to_string(),
    })?;
    let task_raw = get_str(record, "task_type", true)?.unwrap();
    let task_type = TaskType::parse(&task_raw).ok_or_else(|| ValidateError::BadEnum {
        field: "task_type".to_string(),
        value: task_raw.clone(),
        expected: "task_type".to_string(),
    })?;

    let human_score = match record.get("human_score") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => {
            let n = v.as_i64().ok_or_else(|| ValidateError::BadContent {
                field: "human_score".to_string(),
                message: format!("expected integer, got {v}"),
            })?;
            if n < SCORE_MIN as i64 || n > SCORE_MAX as i64 {
                return Err(ValidateError::ScoreOutOfRange {
                    field: "human_score".to_string(),
                    value: n,
                });
            }
            Some(n as i32)
        }
    };

    // direction <-> output modality invariant
    match direction {
        Direction::T2i if !model_output.is_media_only() => {
            return Err(ValidateError::BadContent {
                field: "model_output".to_string(),
                message: "t2i instances must have a media-only model_output".to_string(),
            });
        }
        Direction::I2t if !model_output.is_text_only() => {
            return Err(ValidateError::BadContent {
                field: "model_output".to_string(),
                message: "i2t instances must have a text-only model_output".to_string(),
            });
        }
        _ => {}
    }

    Ok(EvalInstance {
        id,
        task_input,
        task_description,
        model_output,
        criteria,
        reference,
        human_score,
        direction,
        task_type,
        source_dataset,
    })
}

/// Validate one raw JSON record into a [`CandidateJudgment`].
pub fn validate_judgment(record: &serde_json::Value) -> Result<CandidateJudgment, ValidateError> {
    let instance_id = get_str(record, "instance_id", true)?.unwrap();
    let analysis = get_str(record, "analysis", true)?.unwrap();
    if analysis.trim().is_empty() {
        return Err(ValidateError::BadContent {
            field: "analysis".to_string(),
            message: "analysis must be non-empty".to_string(),
        });
    }
    let annotator = get_str(record, "annotator", true)?.unwrap();
    let candidate_index = record
        .get("candidate_index")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ValidateError::MissingField("candidate_index".to_string()))?
        as u32;
    let score = record
        .get("score")
        .and_then(|v| v.as_i64())
        .ok_or_else(|| ValidateError::MissingField("score".to_string()))?;
    if score < SCORE_MIN as i64 || score > SCORE_MAX as i64 {
        return Err(ValidateError::ScoreOutOfRange {
            field: "score".to_string(),
            value: score,
        });
    }
    Ok(CandidateJudgment {
        instance_id,
        candidate_index,
        analysis,
        score: score as i32,
        annotator,
    })
}
