//! Selection: keep one "good" judgment per instance.
//!
//! Human-scored instances keep a uniformly sampled candidate whose score
//! matches the human score, and are discarded when no candidate matches.
//! Instances without a human score keep a candidate whose score is modal
//! among the candidates; every score tied for the maximal frequency is
//! eligible.
//!
//! Sampling consumes candidates in `candidate_index` order, so the outcome
//! is invariant under permutation of the candidate list. Each record draws
//! from its own RNG derived from `(stage_seed, instance_id)`, which makes
//! selection independent of stream order and safe to parallelize.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CandidateJudgment, EvalInstance};
use crate::ingest::JoinedInstance;
use crate::seed;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("precondition violated on `{instance_id}`: {message}")]
    PreconditionViolated {
        instance_id: String,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    HumanMatch,
    Mode,
}

/// Why an instance was dropped during selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    /// No candidate score matched the human score.
    NoMatch,
    /// The instance had no candidates to select from.
    NoCandidates,
}

/// An instance paired with its single chosen judgment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectedRecord {
    pub instance: EvalInstance,
    pub good: CandidateJudgment,
    pub selection_rule: SelectionRule,
    pub rng_seed_used: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    Keep(Box<SelectedRecord>),
    Discard(DiscardReason),
}

impl PartialEq for SelectedRecord {
    fn eq(&self, other: &Self) -> bool {
        self.instance.id == other.instance.id
            && self.good.candidate_index == other.good.candidate_index
            && self.selection_rule == other.selection_rule
    }
}
impl Eq for SelectedRecord {}

fn sorted_candidates(joined: &JoinedInstance) -> Vec<&CandidateJudgment> {
    let mut cands: Vec<&CandidateJudgment> = joined.candidates.iter().collect();
    cands.sort_by_key(|c| c.candidate_index);
    cands
}

fn pick<'a, R: Rng>(eligible: &[&'a CandidateJudgment], rng: &mut R) -> &'a CandidateJudgment {
    eligible[rng.gen_range(0..eligible.len())]
}

/// Select by human-score match. Precondition: `human_score` present.
pub fn human_select(
    joined: &JoinedInstance,
    rng_seed: u64,
) -> Result<Selection, SelectionError> {
    let human = joined.instance.human_score.ok_or_else(|| {
        SelectionError::PreconditionViolated {
            instance_id: joined.instance.id.clone(),
            message: "human_select requires human_score".to_string(),
        }
    })?;
    if joined.candidates.is_empty() {
        return Ok(Selection::Discard(DiscardReason::NoCandidates));
    }
    let cands = sorted_candidates(joined);
    let eligible: Vec<&CandidateJudgment> =
        cands.into_iter().filter(|c| c.score == human).collect();
    if eligible.is_empty() {
        return Ok(Selection::Discard(DiscardReason::NoMatch));
    }
    let mut rng = seed::rng_for(rng_seed);
    let good = pick(&eligible, &mut rng).clone();
    Ok(Selection::Keep(Box::new(SelectedRecord {
        instance: joined.instance.clone(),
        good,
        selection_rule: SelectionRule::HumanMatch,
        rng_seed_used: rng_seed,
    })))
}

/// Modal scores of a candidate list: every score attaining the maximal
/// frequency.
pub fn modal_scores(candidates: &[CandidateJudgment]) -> Vec<i32> {
    let mut freq: BTreeMap<i32, usize> = BTreeMap::new();
    for c in candidates {
        *freq.entry(c.score).or_insert(0) += 1;
    }
    let max = freq.values().copied().max().unwrap_or(0);
    freq.into_iter()
        .filter(|&(_, n)| n == max)
        .map(|(s, _)| s)
        .collect()
}

/// Select by candidate-score mode. Precondition: `human_score` absent.
pub fn mode_select(joined: &JoinedInstance, rng_seed: u64) -> Result<Selection, SelectionError> {
    if joined.instance.human_score.is_some() {
        return Err(SelectionError::PreconditionViolated {
            instance_id: joined.instance.id.clone(),
            message: "mode_select requires absent human_score".to_string(),
        });
    }
    if joined.candidates.is_empty() {
        return Ok(Selection::Discard(DiscardReason::NoCandidates));
    }
    let modes = modal_scores(&joined.candidates);
    let cands = sorted_candidates(joined);
    let eligible: Vec<&CandidateJudgment> = cands
        .into_iter()
        .filter(|c| modes.contains(&c.score))
        .collect();
    let mut rng = seed::rng_for(rng_seed);
    let good = pick(&eligible, &mut rng).clone();
    Ok(Selection::Keep(Box::new(SelectedRecord {
        instance: joined.instance.clone(),
        good,
        selection_rule: SelectionRule::Mode,
        rng_seed_used: rng_seed,
    })))
}

/// Per-dataset and per-rule bookkeeping for a selection run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SelectionLedger {
    pub input: usize,
    pub kept: usize,
    pub discarded: usize,
    pub kept_by_rule: BTreeMap<String, usize>,
    pub discards_by_reason: BTreeMap<String, usize>,
    pub per_dataset_kept: BTreeMap<String, usize>,
    pub per_dataset_discarded: BTreeMap<String, usize>,
    pub errors: Vec<String>,
}

impl SelectionLedger {
    /// Empirical human-match rate over human-scored instances.
    pub fn human_match_rate(&self) -> Option<f64> {
        let kept = *self.kept_by_rule.get("human_match").unwrap_or(&0);
        let no_match = *self.discards_by_reason.get("no_match").unwrap_or(&0);
        let total = kept + no_match;
        (total > 0).then(|| kept as f64 / total as f64)
    }
}

/// Run selection over a stream, dispatching on human-score presence.
///
/// Deterministic given `stage_seed`: each record derives its own seed from
/// the instance id. Per-record errors land in the ledger; the stream never
/// aborts mid-run.
pub fn run_selection<I>(stream: I, stage_seed: u64) -> (Vec<SelectedRecord>, SelectionLedger)
where
    I: IntoIterator<Item = JoinedInstance>,
{
    let mut out = Vec::new();
    let mut ledger = SelectionLedger::default();
    for joined in stream {
        ledger.input += 1;
        let dataset = joined.instance.source_dataset.clone();
        let rng_seed = seed::record_seed(stage_seed, &joined.instance.id);
        let result = if joined.instance.human_score.is_some() {
            human_select(&joined, rng_seed)
        } else {
            mode_select(&joined, rng_seed)
        };
        match result {
            Ok(Selection::Keep(record)) => {
                debug_assert!(selection_is_consistent(&record, &joined));
                let rule = match record.selection_rule {
                    SelectionRule::HumanMatch => "human_match",
                    SelectionRule::Mode => "mode",
                };
                *ledger.kept_by_rule.entry(rule.to_string()).or_insert(0) += 1;
                *ledger.per_dataset_kept.entry(dataset).or_insert(0) += 1;
                ledger.kept += 1;
                out.push(*record);
            }
            Ok(Selection::Discard(reason)) => {
                let key = match reason {
                    DiscardReason::NoMatch => "no_match",
                    DiscardReason::NoCandidates => "no_candidates",
                };
                *ledger.discards_by_reason.entry(key.to_string()).or_insert(0) += 1;
                *ledger.per_dataset_discarded.entry(dataset).or_insert(0) += 1;
                ledger.discarded += 1;
            }
            Err(e) => {
                ledger.errors.push(e.to_string());
                *ledger.per_dataset_discarded.entry(dataset).or_insert(0) += 1;
                ledger.discarded += 1;
            }
        }
    }
    (out, ledger)
}

/// Recompute the selection invariant for a kept record.
pub fn selection_is_consistent(record: &SelectedRecord, joined: &JoinedInstance) -> bool {
    match record.selection_rule {
        SelectionRule::HumanMatch => joined.instance.human_score == Some(record.good.score),
        SelectionRule::Mode => modal_scores(&joined.candidates).contains(&record.good.score),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Content, Direction, TaskType};

    fn instance(id: &str, human: Option<i32>) -> EvalInstance {
        EvalInstance {
            id: id.to_string(),
            task_input: Content::text("input"),
            task_description: "describe".to_string(),
            model_output: Content::text("output"),
            criteria: "criteria".to_string(),
            reference: None,
            human_score: human,
            direction: Direction::I2t,
            task_type: TaskType::ImageCaptioning,
            source_dataset: "polaris".to_string(),
        }
    }

    fn joined(id: &str, human: Option<i32>, scores: &[i32]) -> JoinedInstance {
        JoinedInstance {
            instance: instance(id, human),
            candidates: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| CandidateJudgment {
                    instance_id: id.to_string(),
                    candidate_index: i as u32,
                    analysis: format!("analysis {i}"),
                    score: s,
                    annotator: "gpt-4o".to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn human_select_picks_a_matching_candidate() {
        let j = joined("i0", Some(4), &[3, 4, 5, 4, 2, 4, 1, 5, 3, 4]);
        for seed in 0..50 {
            match human_select(&j, seed).unwrap() {
                Selection::Keep(rec) => {
                    assert_eq!(rec.good.score, 4);
                    assert!([1, 3, 5, 9].contains(&rec.good.candidate_index));
                }
                Selection::Discard(_) => panic!("matching candidates exist"),
            }
        }
    }

    #[test]
    fn human_select_discards_when_nothing_matches() {
        let j = joined("i0", Some(2), &[5; 10]);
        assert_eq!(
            human_select(&j, 7).unwrap(),
            Selection::Discard(DiscardReason::NoMatch)
        );
    }

    #[test]
    fn human_select_single_match_is_deterministic() {
        let j = joined("i0", Some(5), &[1, 2, 5, 3, 4]);
        for seed in 0..20 {
            match human_select(&j, seed).unwrap() {
                Selection::Keep(rec) => assert_eq!(rec.good.candidate_index, 2),
                Selection::Discard(_) => panic!(),
            }
        }
    }

    #[test]
    fn human_select_requires_human_score() {
        let j = joined("i0", None, &[1, 2, 3]);
        assert!(matches!(
            human_select(&j, 0),
            Err(SelectionError::PreconditionViolated { .. })
        ));
    }

    #[test]
    fn mode_select_unique_mode() {
        let j = joined("i0", None, &[5, 5, 4, 3, 5, 5, 5, 2, 5, 5]);
        match mode_select(&j, 11).unwrap() {
            Selection::Keep(rec) => assert_eq!(rec.good.score, 5),
            Selection::Discard(_) => panic!(),
        }
    }

    #[test]
    fn mode_select_tie_spans_both_scores() {
        // scores [4,4,5,5,3]: mode frequency 2 attained by 4 and 5, so the
        // eligible set is the four candidates at indices 0,1,2,3.
        let j = joined("i0", None, &[4, 4, 5, 5, 3]);
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..200 {
            match mode_select(&j, seed).unwrap() {
                Selection::Keep(rec) => {
                    assert!([4, 5].contains(&rec.good.score));
                    assert!(rec.good.candidate_index < 4);
                    seen.insert(rec.good.candidate_index);
                }
                Selection::Discard(_) => panic!(),
            }
        }
        assert_eq!(seen.len(), 4, "all four tied candidates should occur");
    }

    #[test]
    fn mode_select_single_candidate() {
        let j = joined("i0", None, &[3]);
        match mode_select(&j, 0).unwrap() {
            Selection::Keep(rec) => assert_eq!(rec.good.candidate_index, 0),
            Selection::Discard(_) => panic!(),
        }
    }

    #[test]
    fn zero_candidates_discard_with_reason() {
        let j = joined("i0", Some(3), &[]);
        assert_eq!(
            human_select(&j, 0).unwrap(),
            Selection::Discard(DiscardReason::NoCandidates)
        );
        let j = joined("i1", None, &[]);
        assert_eq!(
            mode_select(&j, 0).unwrap(),
            Selection::Discard(DiscardReason::NoCandidates)
        );
    }

    #[test]
    fn selection_invariant_under_candidate_permutation() {
        let j = joined("perm", Some(4), &[4, 2, 4, 5, 4, 1]);
        let mut shuffled = j.clone();
        shuffled.candidates.reverse();
        let seed = 99;
        let a = human_select(&j, seed).unwrap();
        let b = human_select(&shuffled, seed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_selection_counts_and_dispatch() {
        let corpus = vec![
            joined("h1", Some(4), &[4, 4, 1]),
            joined("h2", Some(2), &[5, 5, 5]),
            joined("m1", None, &[3, 3, 1]),
            joined("m2", None, &[]),
        ];
        let (records, ledger) = run_selection(corpus, 42);
        assert_eq!(ledger.input, 4);
        assert_eq!(ledger.kept + ledger.discarded, ledger.input);
        assert_eq!(ledger.kept, 2);
        assert_eq!(ledger.kept_by_rule["human_match"], 1);
        assert_eq!(ledger.kept_by_rule["mode"], 1);
        assert_eq!(ledger.discards_by_reason["no_match"], 1);
        assert_eq!(ledger.discards_by_reason["no_candidates"], 1);
        assert_eq!(records.len(), 2);
    }

    #[test]
    fn all_mode_corpus_keeps_everything() {
        let corpus: Vec<_> = (0..30)
            .map(|i| joined(&format!("m{i}"), None, &[1 + i % 5, 2, 2]))
            .collect();
        let (records, ledger) = run_selection(corpus, 1);
        assert_eq!(ledger.kept, 30);
        assert!(records
            .iter()
            .all(|r| r.selection_rule == SelectionRule::Mode));
    }

    #[test]
    fn same_seed_reproduces_byte_identical_output() {
        let corpus: Vec<_> = (0..100)
            .map(|i| {
                joined(
                    &format!("i{i}"),
                    (i % 3 == 0).then_some(1 + i % 5),
                    &[1, 2, 3, 4, 5, 1 + i % 5, 2, 3],
                )
            })
            .collect();
        let (a, _) = run_selection(corpus.clone(), 42);
        let (b, _) = run_selection(corpus.clone(), 42);
        let bytes_a = serde_json::to_vec(&a).unwrap();
        let bytes_b = serde_json::to_vec(&b).unwrap();
        assert_eq!(bytes_a, bytes_b);

        let (c, _) = run_selection(corpus, 43);
        let bytes_c = serde_json::to_vec(&c).unwrap();
        assert_ne!(bytes_a, bytes_c, "different seed should change some draw");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_joined() -> impl Strategy<Value = JoinedInstance> {
            (
                any::<u32>(),
                proptest::option::of(1i32..=5),
                proptest::collection::vec(1i32..=5, 1..12),
            )
                .prop_map(|(id, human, scores)| joined(&format!("p{id}"), human, &scores))
        }

        proptest! {
            #[test]
            fn kept_plus_discarded_equals_input(corpus in proptest::collection::vec(arb_joined(), 1..40), seed in any::<u64>()) {
                let n = corpus.len();
                let (records, ledger) = run_selection(corpus, seed);
                prop_assert_eq!(ledger.input, n);
                prop_assert_eq!(ledger.kept + ledger.discarded, n);
                prop_assert_eq!(records.len(), ledger.kept);
            }

            #[test]
            fn human_match_rule_holds(joined in arb_joined(), seed in any::<u64>()) {
                if joined.instance.human_score.is_some() {
                    if let Selection::Keep(rec) = human_select(&joined, seed).unwrap() {
                        prop_assert_eq!(Some(rec.good.score), joined.instance.human_score);
                    }
                }
            }

            #[test]
            fn mode_rule_attains_max_frequency(joined in arb_joined(), seed in any::<u64>()) {
                if joined.instance.human_score.is_none() && !joined.candidates.is_empty() {
                    if let Selection::Keep(rec) = mode_select(&joined, seed).unwrap() {
                        let freq = |s: i32| joined.candidates.iter().filter(|c| c.score == s).count();
                        let max = (1..=5).map(freq).max().unwrap();
                        prop_assert_eq!(freq(rec.good.score), max);
                    }
                }
            }
        }
    }
}
