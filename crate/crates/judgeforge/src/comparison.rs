//! Evaluation-comparison pairs: the chosen judgment vs. the candidate with
//! the largest score discrepancy from it.
//!
//! An instance is discarded when every candidate score equals the chosen
//! score (no discrepancy exists). Ties on the maximal gap break by uniform
//! sampling; the A/B presentation order of the pairwise rendering is a
//! seeded per-record coin flip fixed at build time.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CandidateJudgment, EvalInstance};
use crate::ingest::JoinedInstance;
use crate::seed;
use crate::selection::SelectedRecord;

#[derive(Debug, Error)]
pub enum ComparisonError {
    #[error("good judgment (candidate {index}) is not among the candidates of `{instance_id}`")]
    GoodNotAmongCandidates { instance_id: String, index: u32 },
    #[error("no candidates available for `{0}`")]
    NoCandidates(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresentationOrder {
    GoodFirst,
    BadFirst,
}

/// A good/bad judgment pair over one instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub instance: EvalInstance,
    pub good: CandidateJudgment,
    pub bad: CandidateJudgment,
    pub score_gap: i32,
    pub presentation_order: PresentationOrder,
}

#[derive(Debug, Clone)]
pub enum ComparisonOutcome {
    Pair(Box<ComparisonRecord>),
    /// Every candidate score equals the good score.
    Discard,
}

/// Build the comparison pair for one selected record.
///
/// `bad` maximizes `|candidate.score - good.score|` over candidates other
/// than the good one; ties break uniformly under the record seed.
pub fn build_comparison(
    joined: &JoinedInstance,
    good: &CandidateJudgment,
    rng_seed: u64,
) -> Result<ComparisonOutcome, ComparisonError> {
    if joined.candidates.is_empty() {
        return Err(ComparisonError::NoCandidates(joined.instance.id.clone()));
    }
    if !joined
        .candidates
        .iter()
        .any(|c| c.candidate_index == good.candidate_index && c.score == good.score)
    {
        return Err(ComparisonError::GoodNotAmongCandidates {
            instance_id: joined.instance.id.clone(),
            index: good.candidate_index,
        });
    }
    let mut others: Vec<&CandidateJudgment> = joined
        .candidates
        .iter()
        .filter(|c| c.candidate_index != good.candidate_index)
        .collect();
    others.sort_by_key(|c| c.candidate_index);

    let max_gap = others
        .iter()
        .map(|c| (c.score - good.score).abs())
        .max()
        .unwrap_or(0);
    if max_gap == 0 {
        return Ok(ComparisonOutcome::Discard);
    }
    let tied: Vec<&CandidateJudgment> = others
        .into_iter()
        .filter(|c| (c.score - good.score).abs() == max_gap)
        .collect();
    let mut rng = seed::rng_for(rng_seed);
    let bad = tied[rng.gen_range(0..tied.len())].clone();
    let presentation_order = if rng.gen_bool(0.5) {
        PresentationOrder::GoodFirst
    } else {
        PresentationOrder::BadFirst
    };
    Ok(ComparisonOutcome::Pair(Box::new(ComparisonRecord {
        instance: joined.instance.clone(),
        good: good.clone(),
        bad,
        score_gap: max_gap,
        presentation_order,
    })))
}

/// A rendered training sample: prompt text, its media references, and the
/// target completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub prompt: String,
    pub media: Vec<String>,
    pub target: String,
}

fn judgment_text(j: &CandidateJudgment) -> String {
    format!("{}\nScore: {}", j.analysis.trim_end(), j.score)
}

/// Render a comparison record as a pairwise evaluation sample.
///
/// The prompt shows the evaluation task plus both judgments labeled A and B
/// in the record's presentation order; the target names the better label
/// and restates its score.
pub fn render_pairwise(record: &ComparisonRecord) -> TrainingSample {
    let (first, second) = match record.presentation_order {
        PresentationOrder::GoodFirst => (&record.good, &record.bad),
        PresentationOrder::BadFirst => (&record.bad, &record.good),
    };
    let good_label = match record.presentation_order {
        PresentationOrder::GoodFirst => "A",
        PresentationOrder::BadFirst => "B",
    };
    let inst = &record.instance;
    let mut media = inst.task_input.media.clone();
    media.extend(inst.model_output.media.iter().cloned());

    let mut prompt = String::new();
    prompt.push_str("Two evaluations of the same model output are shown below.\n\n");
    prompt.push_str(&format!("Task: {}\n", inst.task_description));
    if let Some(text) = &inst.task_input.text {
        prompt.push_str(&format!("Input: {text}\n"));
    }
    for _ in &inst.task_input.media {
        prompt.push_str("Input image: <image>\n");
    }
    match (&inst.model_output.text, inst.model_output.media.is_empty()) {
        (Some(text), _) => prompt.push_str(&format!("Model output: {text}\n")),
        (None, false) => prompt.push_str("Model output image: <image>\n"),
        _ => {}
    }
    prompt.push_str(&format!("Criteria: {}\n", inst.criteria));
    if let Some(reference) = &inst.reference {
        if let Some(text) = &reference.text {
            prompt.push_str(&format!("Reference: {text}\n"));
        }
        for uri in &reference.media {
            prompt.push_str("Reference image: <image>\n");
            media.push(uri.clone());
        }
    }
    prompt.push_str(&format!(
        "\nEvaluation A:\n{}\n\nEvaluation B:\n{}\n\n",
        judgment_text(first),
        judgment_text(second)
    ));
    prompt.push_str(
        "Which evaluation is better? Answer with the letter, then restate its score.",
    );

    let target = format!(
        "Evaluation {good_label} is better.\nScore: {}",
        record.good.score
    );
    TrainingSample {
        prompt,
        media,
        target,
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ComparisonLedger {
    pub input: usize,
    pub built: usize,
    pub discarded: usize,
    pub errors: Vec<String>,
}

/// Build comparison pairs for every selected record.
///
/// `candidates_by_id` must hold each record's joined candidate list.
/// Deterministic given `stage_seed`; per-record errors go to the ledger.
pub fn run_comparison(
    selected: &[SelectedRecord],
    candidates_by_id: &BTreeMap<String, JoinedInstance>,
    stage_seed: u64,
) -> (Vec<ComparisonRecord>, ComparisonLedger) {
    let mut out = Vec::new();
    let mut ledger = ComparisonLedger::default();
    for record in selected {
        ledger.input += 1;
        let Some(joined) = candidates_by_id.get(&record.instance.id) else {
            ledger
                .errors
                .push(format!("no candidate list for `{}`", record.instance.id));
            continue;
        };
        let rng_seed = seed::record_seed(stage_seed, &record.instance.id);
        match build_comparison(joined, &record.good, rng_seed) {
            Ok(ComparisonOutcome::Pair(pair)) => {
                ledger.built += 1;
                out.push(*pair);
            }
            Ok(ComparisonOutcome::Discard) => ledger.discarded += 1,
            Err(e) => ledger.errors.push(e.to_string()),
        }
    }
    (out, ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Content, Direction, TaskType};
    use crate::selection::SelectionRule;

    fn instance(id: &str) -> EvalInstance {
        EvalInstance {
            id: id.to_string(),
            task_input: Content {
                text: Some("prompt text".to_string()),
                media: vec!["in.jpg".to_string()],
            },
            task_description: "caption the image".to_string(),
            model_output: Content::text("a cat on a mat"),
            criteria: "faithfulness".to_string(),
            reference: None,
            human_score: Some(5),
            direction: Direction::I2t,
            task_type: TaskType::ImageCaptioning,
            source_dataset: "polaris".to_string(),
        }
    }

    fn joined(id: &str, scores: &[i32]) -> JoinedInstance {
        JoinedInstance {
            instance: instance(id),
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
    fn picks_unique_maximal_gap() {
        let j = joined("i0", &[5, 3, 1, 5, 2]);
        let good = j.candidates[0].clone(); // score 5
        match build_comparison(&j, &good, 7).unwrap() {
            ComparisonOutcome::Pair(p) => {
                assert_eq!(p.bad.score, 1);
                assert_eq!(p.score_gap, 4);
            }
            ComparisonOutcome::Discard => panic!(),
        }
    }

    #[test]
    fn tie_on_gap_samples_both_sides() {
        // good 3, others 1 and 5: both gaps are 2
        let j = joined("i0", &[3, 1, 5]);
        let good = j.candidates[0].clone();
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..100 {
            match build_comparison(&j, &good, seed).unwrap() {
                ComparisonOutcome::Pair(p) => {
                    assert_eq!(p.score_gap, 2);
                    seen.insert(p.bad.score);
                }
                ComparisonOutcome::Discard => panic!(),
            }
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![1, 5]);
    }

    #[test]
    fn all_equal_scores_discard() {
        let j = joined("i0", &[4, 4, 4, 4]);
        let good = j.candidates[1].clone();
        assert!(matches!(
            build_comparison(&j, &good, 0).unwrap(),
            ComparisonOutcome::Discard
        ));
    }

    #[test]
    fn good_must_be_among_candidates() {
        let j = joined("i0", &[4, 4]);
        let stranger = CandidateJudgment {
            instance_id: "i0".to_string(),
            candidate_index: 99,
            analysis: "x".to_string(),
            score: 4,
            annotator: "gpt-4o".to_string(),
        };
        assert!(matches!(
            build_comparison(&j, &stranger, 0),
            Err(ComparisonError::GoodNotAmongCandidates { .. })
        ));
    }

    #[test]
    fn pairwise_target_names_the_good_side() {
        let j = joined("i0", &[5, 1]);
        let good = j.candidates[0].clone();
        for seed in 0..40 {
            if let ComparisonOutcome::Pair(p) = build_comparison(&j, &good, seed).unwrap() {
                let sample = render_pairwise(&p);
                match p.presentation_order {
                    PresentationOrder::GoodFirst => {
                        assert!(sample.target.starts_with("Evaluation A is better."))
                    }
                    PresentationOrder::BadFirst => {
                        assert!(sample.target.starts_with("Evaluation B is better."))
                    }
                }
                assert!(sample.target.ends_with(&format!("Score: {}", p.good.score)));
                assert!(sample.prompt.contains("Evaluation A:"));
                assert!(sample.prompt.contains("Evaluation B:"));
                assert_eq!(sample.media, vec!["in.jpg".to_string()]);
            }
        }
    }

    #[test]
    fn run_comparison_ledger_counts() {
        let corpus: Vec<JoinedInstance> = vec![
            joined("a", &[5, 1, 3]),
            joined("b", &[2, 2, 2]),
            joined("c", &[4, 5]),
        ];
        let selected: Vec<SelectedRecord> = corpus
            .iter()
            .map(|j| SelectedRecord {
                instance: j.instance.clone(),
                good: j.candidates[0].clone(),
                selection_rule: SelectionRule::Mode,
                rng_seed_used: 0,
            })
            .collect();
        let by_id: BTreeMap<String, JoinedInstance> = corpus
            .into_iter()
            .map(|j| (j.instance.id.clone(), j))
            .collect();
        let (pairs, ledger) = run_comparison(&selected, &by_id, 42);
        assert_eq!(ledger.input, 3);
        assert_eq!(ledger.built, 2);
        assert_eq!(ledger.discarded, 1);
        assert_eq!(pairs.len(), 2);
        for p in &pairs {
            assert_ne!(p.good.score, p.bad.score);
        }
    }

    #[test]
    fn same_seed_identical_pairs() {
        let corpus: Vec<JoinedInstance> = (0..50)
            .map(|i| joined(&format!("i{i}"), &[3, 1, 5, 2, 4]))
            .collect();
        let selected: Vec<SelectedRecord> = corpus
            .iter()
            .map(|j| SelectedRecord {
                instance: j.instance.clone(),
                good: j.candidates[0].clone(),
                selection_rule: SelectionRule::Mode,
                rng_seed_used: 0,
            })
            .collect();
        let by_id: BTreeMap<String, JoinedInstance> = corpus
            .into_iter()
            .map(|j| (j.instance.id.clone(), j))
            .collect();
        let (a, _) = run_comparison(&selected, &by_id, 9);
        let (b, _) = run_comparison(&selected, &by_id, 9);
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bad_is_maximally_discrepant(
                scores in proptest::collection::vec(1i32..=5, 2..12),
                good_idx in 0usize..12,
                seed in any::<u64>()
            ) {
                let good_idx = good_idx % scores.len();
                let j = joined("p", &scores);
                let good = j.candidates[good_idx].clone();
                match build_comparison(&j, &good, seed).unwrap() {
                    ComparisonOutcome::Pair(p) => {
                        prop_assert_ne!(p.good.score, p.bad.score);
                        let max = j.candidates.iter()
                            .filter(|c| c.candidate_index != good.candidate_index)
                            .map(|c| (c.score - good.score).abs())
                            .max().unwrap();
                        prop_assert_eq!(p.score_gap, max);
                        prop_assert_eq!((p.bad.score - p.good.score).abs(), max);
                        // every candidate's gap is bounded by score_gap
                        for c in &j.candidates {
                            prop_assert!((c.score - good.score).abs() <= p.score_gap);
                        }
                    }
                    ComparisonOutcome::Discard => {
                        prop_assert!(j.candidates.iter().all(|c| c.score == good.score));
                    }
                }
            }
        }
    }
}
