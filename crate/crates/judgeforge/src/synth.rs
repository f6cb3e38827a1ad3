//! Synthetic corpus generation for pipeline testing.
//!
//! Generates instance/judgment sets with a controlled score distribution,
//! per-score human-match rates, and a controlled fraction of instances
//! whose candidates all share one score (those produce no comparison
//! pair). Deterministic given the seed.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{CandidateJudgment, Content, Direction, EvalInstance, Registry};
use crate::ingest::JoinedInstance;
use crate::seed;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub total: usize,
    /// Relative weight of each score 1-5 among instances.
    pub score_weights: [f64; 5],
    /// Probability that at least one candidate matches the instance score,
    /// per score bucket. Only meaningful for human-scored instances.
    pub match_rates: [f64; 5],
    /// Probability that all candidates share a single score.
    pub uniform_candidate_prob: f64,
    /// Fraction of instances carrying a human score.
    pub human_fraction: f64,
    pub candidates_per_instance: usize,
    /// Dataset keys (must exist in the registry) with relative weights.
    pub datasets: Vec<(String, f64)>,
}

impl SynthSpec {
    /// The full-corpus shape: score distribution 7/12/13/15/53 percent,
    /// all instances human-scored, aggregate human-match rate ~82 percent
    /// concentrated so that low-score buckets survive selection nearly
    /// intact, and ~28 percent single-score candidate sets.
    pub fn full_corpus(total: usize) -> Self {
        Self {
            total,
            score_weights: [0.07, 0.12, 0.13, 0.15, 0.53],
            match_rates: [0.97, 0.92, 0.90, 0.86, 0.75],
            uniform_candidate_prob: 0.28,
            human_fraction: 1.0,
            candidates_per_instance: 10,
            datasets: vec![
                ("polaris".to_string(), 1.4),
                ("lave".to_string(), 2.8),
                ("imagereward".to_string(), 2.9),
                ("richhf18k".to_string(), 2.7),
            ],
        }
    }

    /// A small mixed corpus exercising both selection rules.
    pub fn small_mixed(total: usize) -> Self {
        Self {
            total,
            score_weights: [0.1, 0.2, 0.2, 0.2, 0.3],
            match_rates: [0.9, 0.85, 0.8, 0.8, 0.7],
            uniform_candidate_prob: 0.25,
            human_fraction: 0.5,
            candidates_per_instance: 10,
            datasets: vec![
                ("polaris".to_string(), 1.0),
                ("lave".to_string(), 1.0),
                ("richhf18k".to_string(), 1.0),
                ("llavar".to_string(), 1.0),
            ],
        }
    }
}

/// A RichHF-shaped single-dataset pool for test-split sampling.
pub fn richhf_pool_spec(total: usize) -> SynthSpec {
    SynthSpec {
        total,
        score_weights: [0.2; 5],
        match_rates: [1.0; 5],
        uniform_candidate_prob: 0.2,
        human_fraction: 1.0,
        candidates_per_instance: 10,
        datasets: vec![("richhf18k".to_string(), 1.0)],
    }
}

fn other_score(rng: &mut impl Rng, not: i32) -> i32 {
    loop {
        let s = rng.gen_range(1..=5);
        if s != not {
            return s;
        }
    }
}

/// Generate the joined corpus for `spec`.
pub fn generate(spec: &SynthSpec, registry: &Registry, global_seed: u64) -> Vec<JoinedInstance> {
    let stage = seed::stage_seed(global_seed, "synth");
    let mut rng = seed::rng_for(stage);
    let score_dist = WeightedIndex::new(spec.score_weights).expect("positive weights");
    let dataset_dist =
        WeightedIndex::new(spec.datasets.iter().map(|(_, w)| *w)).expect("positive weights");

    let mut out = Vec::with_capacity(spec.total);
    for i in 0..spec.total {
        let id = format!("synth-{i:07}");
        let score = score_dist.sample(&mut rng) as i32 + 1;
        let (dataset, _) = &spec.datasets[dataset_dist.sample(&mut rng)];
        let entry = registry.lookup(dataset).expect("dataset registered");
        let human = rng.gen_bool(spec.human_fraction);

        let n = spec.candidates_per_instance;
        let mut scores: Vec<i32> = Vec::with_capacity(n);
        if rng.gen_bool(spec.uniform_candidate_prob) {
            // single-score candidate set; matches whenever human-scored
            scores.resize(n, score);
        } else {
            let p_match = spec.match_rates[(score - 1) as usize];
            let p_uniform = spec.uniform_candidate_prob;
            // residual match probability among spread candidate sets
            let q = ((p_match - p_uniform) / (1.0 - p_uniform)).clamp(0.0, 1.0);
            if rng.gen_bool(q) {
                let matches = rng.gen_range(1..=3.min(n));
                for _ in 0..matches {
                    scores.push(score);
                }
                while scores.len() < n {
                    scores.push(other_score(&mut rng, score));
                }
            } else {
                while scores.len() < n {
                    scores.push(other_score(&mut rng, score));
                }
                // keep at least two distinct values in the spread set
                if n >= 2 && scores.iter().all(|&s| s == scores[0]) {
                    let replacement = other_score(&mut rng, scores[0]);
                    scores[n - 1] = if replacement == score {
                        other_score(&mut rng, score)
                    } else {
                        replacement
                    };
                }
            }
            scores.shuffle(&mut rng);
        }

        let model_output = match entry.direction {
            Direction::I2t => Content::text(format!("output text {i}")),
            Direction::T2i => Content::media(format!("gen/{id}.png")),
        };
        let instance = EvalInstance {
            id: id.clone(),
            task_input: Content {
                text: Some(format!("input {i}")),
                media: vec![format!("img/{id}.jpg")],
            },
            task_description: format!("task for {}", entry.task_type.as_str()),
            model_output,
            criteria: "overall quality".to_string(),
            reference: None,
            human_score: human.then_some(score),
            direction: entry.direction,
            task_type: entry.task_type,
            source_dataset: dataset.clone(),
        };
        let candidates = scores
            .into_iter()
            .enumerate()
            .map(|(k, s)| CandidateJudgment {
                instance_id: id.clone(),
                candidate_index: k as u32,
                analysis: format!("c{k} of {id}"),
                score: s,
                annotator: "gpt-4o".to_string(),
            })
            .collect();
        out.push(JoinedInstance {
            instance,
            candidates,
        });
    }
    out
}

/// Write a joined corpus as instance/judgment JSONL files.
pub fn write_corpus_files(
    corpus: &[JoinedInstance],
    instances_path: &std::path::Path,
    judgments_path: &std::path::Path,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut instances = std::io::BufWriter::new(std::fs::File::create(instances_path)?);
    let mut judgments = std::io::BufWriter::new(std::fs::File::create(judgments_path)?);
    for joined in corpus {
        writeln!(instances, "{}", serde_json::to_string(&joined.instance)?)?;
        for c in &joined.candidates {
            writeln!(judgments, "{}", serde_json::to_string(c)?)?;
        }
    }
    instances.flush()?;
    judgments.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let registry = Registry::builtin();
        let spec = SynthSpec::small_mixed(200);
        let a = generate(&spec, &registry, 42);
        let b = generate(&spec, &registry, 42);
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = generate(&spec, &registry, 43);
        assert_ne!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&c).unwrap()
        );
    }

    #[test]
    fn score_distribution_tracks_weights() {
        let registry = Registry::builtin();
        let spec = SynthSpec::full_corpus(20_000);
        let corpus = generate(&spec, &registry, 7);
        let mut hist = [0usize; 5];
        for j in &corpus {
            hist[(j.instance.human_score.unwrap() - 1) as usize] += 1;
        }
        let total: usize = hist.iter().sum();
        assert_eq!(total, 20_000);
        for (i, &w) in spec.score_weights.iter().enumerate() {
            let p = hist[i] as f64 / total as f64;
            assert!(
                (p - w).abs() < 0.02,
                "bucket {} proportion {p:.3} vs weight {w:.3}",
                i + 1
            );
        }
    }

    #[test]
    fn match_rate_tracks_configuration() {
        let registry = Registry::builtin();
        let spec = SynthSpec::full_corpus(20_000);
        let corpus = generate(&spec, &registry, 9);
        let mut matched = 0usize;
        for j in &corpus {
            let human = j.instance.human_score.unwrap();
            if j.candidates.iter().any(|c| c.score == human) {
                matched += 1;
            }
        }
        let rate = matched as f64 / corpus.len() as f64;
        assert!((rate - 0.82).abs() < 0.02, "aggregate match rate {rate:.3}");
    }

    #[test]
    fn t2i_datasets_get_media_outputs() {
        let registry = Registry::builtin();
        let spec = richhf_pool_spec(50);
        let corpus = generate(&spec, &registry, 3);
        for j in &corpus {
            assert_eq!(j.instance.direction, Direction::T2i);
            assert!(j.instance.model_output.is_media_only());
        }
    }
}
