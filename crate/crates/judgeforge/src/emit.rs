//! Emission of curated training files and the reproducibility manifest.
//!
//! Output schema is one JSON object per line: `{id, kind, prompt, media,
//! target}` for SFT samples and `{id, prompt, media, chosen, rejected}`
//! for preference pairs. The schema is trainer-agnostic; thin adapters
//! can convert to any specific trainer format. DPO prompts reuse the
//! pointwise template: the preference is over alternative evaluations of
//! the same pointwise prompt, not over the pairwise rendering.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotator::{render_prompt, AnnotateError, PromptTemplate};
use crate::comparison::{render_pairwise, ComparisonRecord};
use crate::seed;
use crate::selection::SelectedRecord;

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Render(#[from] AnnotateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Pointwise,
    Pairwise,
}

/// One SFT training line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub id: String,
    pub kind: SampleKind,
    pub prompt: String,
    pub media: Vec<String>,
    pub target: String,
}

/// One DPO preference line: chosen is the good evaluation, rejected the
/// bad one, over the same pointwise prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: String,
    pub media: Vec<String>,
    pub chosen: String,
    pub rejected: String,
}

/// Render the pointwise evaluation sample for a selected record.
pub fn pointwise_sample(record: &SelectedRecord) -> Result<SftSample, EmitError> {
    let template = PromptTemplate::builtin(record.instance.task_type);
    let rendered = render_prompt(&record.instance, &template)?;
    Ok(SftSample {
        id: record.instance.id.clone(),
        kind: SampleKind::Pointwise,
        prompt: rendered.text,
        media: rendered.media,
        target: format!(
            "{}\nScore: {}",
            record.good.analysis.trim_end(),
            record.good.score
        ),
    })
}

/// Render the pairwise evaluation sample for a comparison record.
pub fn pairwise_sample(record: &ComparisonRecord) -> SftSample {
    let rendered = render_pairwise(record);
    SftSample {
        id: record.instance.id.clone(),
        kind: SampleKind::Pairwise,
        prompt: rendered.prompt,
        media: rendered.media,
        target: rendered.target,
    }
}

/// Render the preference pair for a comparison record.
pub fn preference_pair(record: &ComparisonRecord) -> Result<PreferencePair, EmitError> {
    let template = PromptTemplate::builtin(record.instance.task_type);
    let rendered = render_prompt(&record.instance, &template)?;
    Ok(PreferencePair {
        id: record.instance.id.clone(),
        prompt: rendered.text,
        media: rendered.media,
        chosen: format!(
            "{}\nScore: {}",
            record.good.analysis.trim_end(),
            record.good.score
        ),
        rejected: format!(
            "{}\nScore: {}",
            record.bad.analysis.trim_end(),
            record.bad.score
        ),
    })
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), EmitError> {
    let io_err = |source: std::io::Error| EmitError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Emit one pointwise sample per selected record. Count is preserved.
pub fn emit_sft(records: &[SelectedRecord], path: &Path) -> Result<usize, EmitError> {
    let samples = records
        .iter()
        .map(pointwise_sample)
        .collect::<Result<Vec<_>, _>>()?;
    write_lines(path, &samples)?;
    Ok(samples.len())
}

/// Emit the union of pointwise and pairwise samples, shuffled
/// deterministically under the seed. Count is the sum of both inputs.
pub fn emit_mix_sft(
    records: &[SelectedRecord],
    comparisons: &[ComparisonRecord],
    path: &Path,
    stage_seed: u64,
) -> Result<usize, EmitError> {
    let mut samples = records
        .iter()
        .map(pointwise_sample)
        .collect::<Result<Vec<_>, _>>()?;
    samples.extend(comparisons.iter().map(pairwise_sample));
    let mut rng = seed::rng_for(stage_seed);
    samples.shuffle(&mut rng);
    write_lines(path, &samples)?;
    Ok(samples.len())
}

/// Emit one preference pair per comparison record. Count is preserved.
pub fn emit_dpo(comparisons: &[ComparisonRecord], path: &Path) -> Result<usize, EmitError> {
    let pairs = comparisons
        .iter()
        .map(preference_pair)
        .collect::<Result<Vec<_>, _>>()?;
    write_lines(path, &pairs)?;
    Ok(pairs.len())
}

/// One pipeline stage's entry in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    pub input_count: usize,
    pub output_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_distribution: Option<[usize; 5]>,
}

/// Reproducibility manifest written alongside every emitted artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub global_seed: u64,
    /// Hex SHA-256 of the effective configuration text.
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    /// Advisory downstream trainer settings; not consumed by this tool.
    pub recommended_hyperparameters: BTreeMap<String, String>,
    /// Assumptions baked into this run (registry scales, stratification).
    pub notes: Vec<String>,
}

/// Downstream trainer settings recorded as advisory metadata.
pub fn default_hyperparameters() -> BTreeMap<String, String> {
    [
        ("sft_epochs", "2"),
        ("sft_batch_size", "192"),
        ("sft_learning_rate", "1e-5"),
        ("dpo_epochs", "1"),
        ("dpo_learning_rate", "5e-7"),
        ("dpo_beta", "0.1"),
        ("dpo_gamma", "0"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub fn config_hash(config_text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    format!("{:x}", hasher.finalize())
}

impl Manifest {
    pub fn new(global_seed: u64, config_text: &str) -> Self {
        Self {
            global_seed,
            config_hash: config_hash(config_text),
            stages: Vec::new(),
            recommended_hyperparameters: default_hyperparameters(),
            notes: vec![
                "registry score scales for human-annotated sources are assumptions; see registry.conf".to_string(),
                "balance preserves per-dataset proportions inside each score bucket".to_string(),
            ],
        }
    }

    pub fn push_stage(
        &mut self,
        stage: &str,
        seed: u64,
        input_count: usize,
        output_count: usize,
        score_distribution: Option<[usize; 5]>,
    ) {
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            seed,
            input_count,
            output_count,
            score_distribution,
        });
    }

    /// Check the chain: each stage must consume what the prior stage
    /// produced. Emission stages (parallel outputs of one stage) are
    /// exempt from chaining but must still be internally consistent.
    pub fn counts_consistent(&self) -> bool {
        self.stages.windows(2).all(|w| {
            let (prev, next) = (&w[0], &w[1]);
            // emit stages fan out from the same inputs
            next.stage.starts_with("emit") || next.input_count == prev.output_count
        })
    }

    /// Write as `<artifact>.manifest.json` next to the artifact.
    pub fn write_for(&self, artifact: &Path) -> Result<(), EmitError> {
        let path = manifest_path(artifact);
        let io_err = |source: std::io::Error| EmitError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(&path).map_err(io_err)?);
        serde_json::to_writer_pretty(&mut out, self).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
        out.flush().map_err(io_err)
    }
}

pub fn manifest_path(artifact: &Path) -> std::path::PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agreement::{extract_score, ScoreRange};
    use crate::comparison::PresentationOrder;
    use crate::corpus::{CandidateJudgment, Content, Direction, EvalInstance, TaskType};
    use crate::selection::SelectionRule;

    fn selected(id: &str, score: i32) -> SelectedRecord {
        SelectedRecord {
            instance: EvalInstance {
                id: id.to_string(),
                task_input: Content {
                    text: Some("a photo".to_string()),
                    media: vec!["in.jpg".to_string()],
                },
                task_description: "caption the image".to_string(),
                model_output: Content::text("a cat"),
                criteria: "accuracy".to_string(),
                reference: None,
                human_score: Some(score),
                direction: Direction::I2t,
                task_type: TaskType::ImageCaptioning,
                source_dataset: "polaris".to_string(),
            },
            good: CandidateJudgment {
                instance_id: id.to_string(),
                candidate_index: 0,
                analysis: format!("analysis for {id}"),
                score,
                annotator: "gpt-4o".to_string(),
            },
            selection_rule: SelectionRule::HumanMatch,
            rng_seed_used: 0,
        }
    }

    fn comparison(id: &str, good_score: i32, bad_score: i32) -> ComparisonRecord {
        let s = selected(id, good_score);
        ComparisonRecord {
            instance: s.instance,
            good: s.good,
            bad: CandidateJudgment {
                instance_id: id.to_string(),
                candidate_index: 1,
                analysis: format!("bad analysis for {id}"),
                score: bad_score,
                annotator: "gpt-4o".to_string(),
            },
            score_gap: (good_score - bad_score).abs(),
            presentation_order: PresentationOrder::GoodFirst,
        }
    }

    #[test]
    fn sft_count_preserved_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..20).map(|i| selected(&format!("i{i}"), 1 + (i % 5))).collect();
        let path = dir.path().join("sft.jsonl");
        let n = emit_sft(&records, &path).unwrap();
        assert_eq!(n, 20);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 20);
        for (line, record) in text.lines().zip(&records) {
            let sample: SftSample = serde_json::from_str(line).unwrap();
            assert_eq!(sample.kind, SampleKind::Pointwise);
            // the emitted target recovers analysis and score
            assert_eq!(
                extract_score(&sample.target, ScoreRange::default()),
                Some(record.good.score)
            );
            assert!(sample.target.starts_with(&record.good.analysis));
        }
    }

    #[test]
    fn empty_input_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sft.jsonl");
        let n = emit_sft(&[], &path).unwrap();
        assert_eq!(n, 0);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn mix_sft_union_counts_and_tags() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..12).map(|i| selected(&format!("p{i}"), 1 + (i % 5))).collect();
        let comparisons: Vec<_> = (0..7).map(|i| comparison(&format!("c{i}"), 5, 1)).collect();
        let path = dir.path().join("mix.jsonl");
        let n = emit_mix_sft(&records, &comparisons, &path, 42).unwrap();
        assert_eq!(n, 19);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut pointwise = 0;
        let mut pairwise = 0;
        for line in text.lines() {
            let sample: SftSample = serde_json::from_str(line).unwrap();
            match sample.kind {
                SampleKind::Pointwise => pointwise += 1,
                SampleKind::Pairwise => pairwise += 1,
            }
        }
        assert_eq!((pointwise, pairwise), (12, 7));
    }

    #[test]
    fn mix_sft_same_seed_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..30).map(|i| selected(&format!("p{i}"), 1 + (i % 5))).collect();
        let comparisons: Vec<_> = (0..10).map(|i| comparison(&format!("c{i}"), 4, 2)).collect();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let c = dir.path().join("c.jsonl");
        emit_mix_sft(&records, &comparisons, &a, 7).unwrap();
        emit_mix_sft(&records, &comparisons, &b, 7).unwrap();
        emit_mix_sft(&records, &comparisons, &c, 8).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    }

    #[test]
    fn dpo_pairs_have_distinct_score_lines() {
        let dir = tempfile::tempdir().unwrap();
        let comparisons = vec![comparison("c0", 5, 1), comparison("c1", 3, 5)];
        let path = dir.path().join("dpo.jsonl");
        let n = emit_dpo(&comparisons, &path).unwrap();
        assert_eq!(n, 2);
        let text = std::fs::read_to_string(&path).unwrap();
        let first: PreferencePair = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first.chosen.ends_with("Score: 5"));
        assert!(first.rejected.ends_with("Score: 1"));
        for line in text.lines() {
            let pair: PreferencePair = serde_json::from_str(line).unwrap();
            assert_ne!(pair.chosen, pair.rejected);
            let c = extract_score(&pair.chosen, ScoreRange::default()).unwrap();
            let r = extract_score(&pair.rejected, ScoreRange::default()).unwrap();
            assert_ne!(c, r);
            // DPO prompt is the pointwise prompt, not the A/B rendering
            assert!(!pair.prompt.contains("Evaluation A:"));
        }
    }

    #[test]
    fn manifest_chain_consistency() {
        let mut m = Manifest::new(42, "config text");
        m.push_stage("select", 1, 100, 80, None);
        m.push_stage("balance", 2, 80, 50, Some([10, 10, 10, 10, 10]));
        m.push_stage("compare", 3, 50, 35, None);
        m.push_stage("emit_sft", 4, 50, 50, None);
        m.push_stage("emit_dpo", 5, 35, 35, None);
        assert!(m.counts_consistent());

        let mut broken = m.clone();
        broken.stages[1].input_count = 79;
        assert!(!broken.counts_consistent());
    }

    #[test]
    fn manifest_written_next_to_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("sft.jsonl");
        std::fs::write(&artifact, "").unwrap();
        let m = Manifest::new(1, "cfg");
        m.write_for(&artifact).unwrap();
        let mpath = manifest_path(&artifact);
        assert!(mpath.ends_with("sft.jsonl.manifest.json"));
        let loaded: Manifest =
            serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.recommended_hyperparameters["dpo_beta"], "0.1");
    }
}
