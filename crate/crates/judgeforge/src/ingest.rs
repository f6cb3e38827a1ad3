//! Streaming corpus ingestion: joins candidate judgments to instances and
//! reports corpus statistics.
//!
//! Judgments are indexed by instance id in one pass; instances then stream
//! one line at a time, so memory stays bounded by the join index plus a
//! single record regardless of corpus length. Malformed lines are skipped
//! with a diagnostic (fatal under strict mode); a judgment referencing an
//! unknown instance is tallied as an orphan after the stream is drained.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    validate_instance, validate_judgment, CandidateJudgment, EvalInstance, Registry, ValidateError,
    SCORE_MAX, SCORE_MIN,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate instance id `{0}`")]
    DuplicateInstanceId(String),
}

/// An instance joined with all of its candidate judgments, ordered by
/// candidate index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JoinedInstance {
    pub instance: EvalInstance,
    pub candidates: Vec<CandidateJudgment>,
}

/// Per-file ingestion bookkeeping.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestLedger {
    pub instances: usize,
    pub judgments: usize,
    pub skipped_instance_lines: usize,
    pub skipped_judgment_lines: usize,
    /// Judgments whose instance id never appeared in the instances file.
    pub orphan_judgments: usize,
    /// Instances that had no judgments at all.
    pub instances_without_candidates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Skip malformed lines with a logged diagnostic.
    Lenient,
    /// Any malformed line is fatal.
    Strict,
}

/// Streaming reader over the joined corpus.
///
/// Yields each instance exactly once, joined with its judgments. Duplicate
/// instance ids are fatal in both modes.
pub struct CorpusReader {
    lines: Lines<BufReader<File>>,
    instances_path: String,
    line_no: usize,
    judgment_index: BTreeMap<String, Vec<CandidateJudgment>>,
    seen_ids: HashSet<String>,
    mode: ParseMode,
    registry: Registry,
    ledger: IngestLedger,
}

impl CorpusReader {
    pub fn open(
        instances_path: &Path,
        judgments_path: &Path,
        registry: &Registry,
        mode: ParseMode,
    ) -> Result<Self, IngestError> {
        let mut ledger = IngestLedger::default();
        let judgment_index = index_judgments(judgments_path, mode, &mut ledger)?;
        let file = File::open(instances_path).map_err(|source| IngestError::Io {
            path: instances_path.display().to_string(),
            source,
        })?;
        Ok(Self {
            lines: BufReader::new(file).lines(),
            instances_path: instances_path.display().to_string(),
            line_no: 0,
            judgment_index,
            seen_ids: HashSet::new(),
            mode,
            registry: registry.clone(),
            ledger,
        })
    }

    /// Ledger so far; complete once the iterator is drained.
    pub fn ledger(&self) -> &IngestLedger {
        &self.ledger
    }

    /// Drain the remaining stream and return the final ledger. Orphan
    /// counting needs the full instance id set, so this consumes the reader.
    pub fn finish(mut self) -> Result<(Vec<JoinedInstance>, IngestLedger), IngestError> {
        let mut out = Vec::new();
        for item in &mut self {
            out.push(item?);
        }
        // anything left in the index was never claimed by an instance
        self.ledger.orphan_judgments += self.judgment_index.values().map(Vec::len).sum::<usize>();
        Ok((out, self.ledger))
    }
}

impl Iterator for CorpusReader {
    type Item = Result<JoinedInstance, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = match self.lines.next()? {
                Ok(l) => l,
                Err(source) => {
                    return Some(Err(IngestError::Io {
                        path: self.instances_path.clone(),
                        source,
                    }))
                }
            };
            self.line_no += 1;
            if raw.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<serde_json::Value>(&raw)
                .map_err(|e| e.to_string())
                .and_then(|v| {
                    validate_instance(&v, &self.registry).map_err(|e: ValidateError| e.to_string())
                });
            let instance = match parsed {
                Ok(inst) => inst,
                Err(message) => {
                    if self.mode == ParseMode::Strict {
                        return Some(Err(IngestError::Parse {
                            path: self.instances_path.clone(),
                            line: self.line_no,
                            message,
                        }));
                    }
                    log::warn!("{}:{}: skipped: {}", self.instances_path, self.line_no, message);
                    self.ledger.skipped_instance_lines += 1;
                    continue;
                }
            };
            if !self.seen_ids.insert(instance.id.clone()) {
                return Some(Err(IngestError::DuplicateInstanceId(instance.id)));
            }
            let mut candidates = self
                .judgment_index
                .remove(&instance.id)
                .unwrap_or_default();
            candidates.sort_by_key(|c| c.candidate_index);
            self.ledger.instances += 1;
            if candidates.is_empty() {
                self.ledger.instances_without_candidates += 1;
            }
            return Some(Ok(JoinedInstance {
                instance,
                candidates,
            }));
        }
    }
}

fn index_judgments(
    path: &Path,
    mode: ParseMode,
    ledger: &mut IngestLedger,
) -> Result<BTreeMap<String, Vec<CandidateJudgment>>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut index: BTreeMap<String, Vec<CandidateJudgment>> = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let raw = line.map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<serde_json::Value>(&raw)
            .map_err(|e| e.to_string())
            .and_then(|v| validate_judgment(&v).map_err(|e| e.to_string()));
        match parsed {
            Ok(judgment) => {
                ledger.judgments += 1;
                index.entry(judgment.instance_id.clone()).or_default().push(judgment);
            }
            Err(message) => {
                if mode == ParseMode::Strict {
                    return Err(IngestError::Parse {
                        path: path.display().to_string(),
                        line: idx + 1,
                        message,
                    });
                }
                log::warn!("{}:{}: skipped: {}", path.display(), idx + 1, message);
                ledger.skipped_judgment_lines += 1;
            }
        }
    }
    Ok(index)
}

/// Load the whole corpus into memory. Convenience over [`CorpusReader`]
/// for the stages that need random access.
pub fn load_corpus(
    instances_path: &Path,
    judgments_path: &Path,
    registry: &Registry,
    mode: ParseMode,
) -> Result<(Vec<JoinedInstance>, IngestLedger), IngestError> {
    CorpusReader::open(instances_path, judgments_path, registry, mode)?.finish()
}

/// Corpus statistics in the shape of the score-distribution table:
/// per-score counts and percentages, plus per-dataset and per-task counts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StatsReport {
    pub total: usize,
    /// Counts for scores 1..=5, by representative score (human if present,
    /// else the smallest modal candidate score).
    pub score_counts: [usize; 5],
    pub score_percentages: [f64; 5],
    /// Instances with neither a human score nor any candidates.
    pub unscored: usize,
    pub per_dataset: BTreeMap<String, usize>,
    pub per_task: BTreeMap<String, usize>,
}

/// Representative score of a joined instance: the human score when present,
/// otherwise the smallest modal candidate score, otherwise None.
pub fn representative_score(joined: &JoinedInstance) -> Option<i32> {
    if let Some(h) = joined.instance.human_score {
        return Some(h);
    }
    if joined.candidates.is_empty() {
        return None;
    }
    let mut freq = BTreeMap::new();
    for c in &joined.candidates {
        *freq.entry(c.score).or_insert(0usize) += 1;
    }
    let max = *freq.values().max().unwrap();
    freq.iter().find(|(_, &n)| n == max).map(|(&s, _)| s)
}

/// Fold a stream of joined instances into a [`StatsReport`].
pub fn corpus_stats<I>(stream: I) -> StatsReport
where
    I: IntoIterator<Item = JoinedInstance>,
{
    let mut score_counts = [0usize; 5];
    let mut unscored = 0usize;
    let mut per_dataset: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_task: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for joined in stream {
        total += 1;
        *per_dataset
            .entry(joined.instance.source_dataset.clone())
            .or_insert(0) += 1;
        *per_task
            .entry(joined.instance.task_type.as_str().to_string())
            .or_insert(0) += 1;
        match representative_score(&joined) {
            Some(s) if (SCORE_MIN..=SCORE_MAX).contains(&s) => {
                score_counts[(s - 1) as usize] += 1;
            }
            _ => unscored += 1,
        }
    }
    let scored: usize = score_counts.iter().sum();
    let mut score_percentages = [0.0f64; 5];
    if scored > 0 {
        for (i, &c) in score_counts.iter().enumerate() {
            score_percentages[i] = 100.0 * c as f64 / scored as f64;
        }
    }
    StatsReport {
        total,
        score_counts,
        score_percentages,
        unscored,
        per_dataset,
        per_task,
    }
}

impl StatsReport {
    /// Aligned-column text table mirroring the score-distribution table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("score      #1      #2      #3      #4      #5     all\n");
        out.push_str("count ");
        for c in self.score_counts {
            out.push_str(&format!("{c:>7} "));
        }
        out.push_str(&format!("{:>7}\n", self.score_counts.iter().sum::<usize>()));
        out.push_str("pct   ");
        for p in self.score_percentages {
            out.push_str(&format!("{:>6.0}% ", p));
        }
        out.push_str("   100%\n");
        if self.unscored > 0 {
            out.push_str(&format!("unscored instances: {}\n", self.unscored));
        }
        out.push_str(&format!("total instances: {}\n", self.total));
        out.push_str("\nper dataset:\n");
        for (k, v) in &self.per_dataset {
            out.push_str(&format!("  {k:<20} {v:>7}\n"));
        }
        out.push_str("per task:\n");
        for (k, v) in &self.per_task {
            out.push_str(&format!("  {k:<20} {v:>7}\n"));
        }
        out
    }
}

/// Check candidate-list integrity for an instance that is about to enter
/// selection: ids match and candidate indices are distinct.
pub fn check_join_integrity(joined: &JoinedInstance) -> Result<(), IngestError> {
    let mut seen = HashSet::new();
    for c in &joined.candidates {
        if c.instance_id != joined.instance.id {
            return Err(IngestError::Parse {
                path: String::new(),
                line: 0,
                message: format!(
                    "judgment for `{}` attached to instance `{}`",
                    c.instance_id, joined.instance.id
                ),
            });
        }
        if !seen.insert(c.candidate_index) {
            return Err(IngestError::Parse {
                path: String::new(),
                line: 0,
                message: format!(
                    "duplicate candidate_index {} on instance `{}`",
                    c.candidate_index, joined.instance.id
                ),
            });
        }
    }
    Ok(())
}
