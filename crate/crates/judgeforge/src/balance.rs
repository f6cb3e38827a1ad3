//! Score balancing: capped stratified downsampling of per-score buckets,
//! and the balanced test-split sampler.
//!
//! Both operations sample without replacement and are deterministic given
//! the seed. Downsampling within a bucket is stratified by source dataset
//! with largest-remainder apportionment, so each dataset's share of the
//! sampled bucket stays within one record of its exact proportional share.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::selection::SelectedRecord;

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("caps line {line}: expected `score=cap`, got `{text}`")]
    BadCapsLine { line: usize, text: String },
    #[error("caps must cover scores 1-5; missing score {0}")]
    MissingCap(i32),
}

/// Per-score record caps. Shipped default reproduces the filtered corpus
/// distribution; see `data/table2_filtered.caps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCaps {
    /// caps[s-1] is the maximum record count for score s.
    pub caps: [usize; 5],
}

pub const TABLE2_FILTERED_CAPS_TEXT: &str = include_str!("../data/table2_filtered.caps");

impl ScoreCaps {
    /// The shipped balance configuration for the filtered-corpus shape.
    pub fn table2_filtered() -> Self {
        Self::parse(TABLE2_FILTERED_CAPS_TEXT).expect("shipped caps file is valid")
    }

    /// Parse a caps file: one `score=cap` line per score, `#` comments.
    pub fn parse(text: &str) -> Result<Self, BalanceError> {
        let mut caps = [None; 5];
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parsed = line.split_once('=').and_then(|(s, c)| {
                let score: i32 = s.trim().parse().ok()?;
                let cap: usize = c.trim().parse().ok()?;
                (1..=5).contains(&score).then_some((score, cap))
            });
            let (score, cap) = parsed.ok_or_else(|| BalanceError::BadCapsLine {
                line: idx + 1,
                text: line.to_string(),
            })?;
            caps[(score - 1) as usize] = Some(cap);
        }
        for (i, c) in caps.iter().enumerate() {
            if c.is_none() {
                return Err(BalanceError::MissingCap(i as i32 + 1));
            }
        }
        Ok(Self {
            caps: caps.map(Option::unwrap),
        })
    }

    pub fn load(path: &Path) -> Result<Self, BalanceError> {
        let text = std::fs::read_to_string(path).map_err(|source| BalanceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn cap_for(&self, score: i32) -> usize {
        self.caps[(score - 1) as usize]
    }
}

/// Largest-remainder apportionment of `total` over weighted shares.
///
/// Allocations sum to `total` and each differs from its exact quota by
/// less than one. Ties on the fractional remainder break in slice order.
/// Requires `weights` non-empty with a positive sum.
pub fn largest_remainder(total: usize, weights: &[usize]) -> Vec<usize> {
    let weight_sum: usize = weights.iter().sum();
    assert!(weight_sum > 0, "largest_remainder needs positive weights");
    let mut alloc = Vec::with_capacity(weights.len());
    let mut remainders = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for &w in weights {
        let quota = total as f64 * w as f64 / weight_sum as f64;
        let floor = quota.floor() as usize;
        alloc.push(floor);
        remainders.push(quota - floor as f64);
        assigned += floor;
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        remainders[b]
            .partial_cmp(&remainders[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        alloc[i] += 1;
    }
    alloc
}

fn sample_without_replacement<T: Clone>(
    pool: &[T],
    n: usize,
    rng: &mut impl rand::Rng,
) -> Vec<T> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

/// Downsample each score bucket to its cap.
///
/// Buckets at or under their cap pass through untouched. Oversized buckets
/// are sampled without replacement, stratified by source dataset via
/// largest-remainder apportionment of the cap. Output is sorted by
/// `(score, source_dataset, instance_id)`.
pub fn balance_scores(
    records: &[SelectedRecord],
    caps: &ScoreCaps,
    stage_seed: u64,
) -> Vec<SelectedRecord> {
    let mut buckets: BTreeMap<i32, Vec<&SelectedRecord>> = BTreeMap::new();
    for r in records {
        buckets.entry(r.good.score).or_default().push(r);
    }

    let mut out: Vec<SelectedRecord> = Vec::new();
    for (score, bucket) in buckets {
        let cap = caps.cap_for(score);
        if bucket.len() <= cap {
            out.extend(bucket.into_iter().cloned());
            continue;
        }
        // stratify by dataset, apportion the cap, sample each stratum
        let mut strata: BTreeMap<&str, Vec<&SelectedRecord>> = BTreeMap::new();
        for r in bucket {
            strata
                .entry(r.instance.source_dataset.as_str())
                .or_default()
                .push(r);
        }
        let keys: Vec<&str> = strata.keys().copied().collect();
        let weights: Vec<usize> = keys.iter().map(|k| strata[k].len()).collect();
        let quotas = largest_remainder(cap, &weights);
        for (key, quota) in keys.iter().zip(quotas) {
            let mut pool: Vec<&SelectedRecord> = strata.remove(key).unwrap();
            pool.sort_by(|a, b| a.instance.id.cmp(&b.instance.id));
            let mut rng = seed::rng_for(seed::record_seed(
                stage_seed,
                &format!("balance/{score}/{key}"),
            ));
            out.extend(
                sample_without_replacement(&pool, quota, &mut rng)
                    .into_iter()
                    .cloned(),
            );
        }
    }
    out.sort_by(|a, b| {
        (a.good.score, &a.instance.source_dataset, &a.instance.id).cmp(&(
            b.good.score,
            &b.instance.source_dataset,
            &b.instance.id,
        ))
    });
    out
}

/// Sample `n` records with a balanced score distribution.
///
/// Targets are an equal split over the five score buckets (largest
/// remainder, lower scores first on ties). When a bucket cannot meet its
/// target, it contributes everything it has and the deficit spreads
/// equally over the remaining buckets. Returns exactly
/// `min(n, records.len())` records.
pub fn balanced_test_split(
    records: &[SelectedRecord],
    n: usize,
    stage_seed: u64,
) -> Vec<SelectedRecord> {
    let mut buckets: BTreeMap<i32, Vec<&SelectedRecord>> = BTreeMap::new();
    for r in records {
        buckets.entry(r.good.score).or_default().push(r);
    }
    for bucket in buckets.values_mut() {
        bucket.sort_by(|a, b| a.instance.id.cmp(&b.instance.id));
    }

    let scores: Vec<i32> = buckets.keys().copied().collect();
    let avail: BTreeMap<i32, usize> = buckets.iter().map(|(&s, v)| (s, v.len())).collect();
    let total_available: usize = avail.values().sum();
    let want = n.min(total_available);

    // equal-share apportionment with saturation: starved buckets are fixed
    // at their size and the rest is re-apportioned over active buckets
    let mut targets: BTreeMap<i32, usize> = BTreeMap::new();
    let mut active: Vec<i32> = scores.clone();
    let mut remaining = want;
    while remaining > 0 && !active.is_empty() {
        let alloc = largest_remainder(remaining, &vec![1; active.len()]);
        let mut saturated = Vec::new();
        for (&s, &a) in active.iter().zip(alloc.iter()) {
            if avail[&s].saturating_sub(*targets.get(&s).unwrap_or(&0)) < a {
                saturated.push(s);
            }
        }
        if saturated.is_empty() {
            for (&s, a) in active.iter().zip(alloc) {
                *targets.entry(s).or_insert(0) += a;
            }
            break;
        }
        for s in &saturated {
            remaining -= avail[s] - *targets.get(s).unwrap_or(&0);
            targets.insert(*s, avail[s]);
        }
        active.retain(|s| !saturated.contains(s));
    }

    let mut out: Vec<SelectedRecord> = Vec::new();
    for (&score, bucket) in &buckets {
        let take = *targets.get(&score).unwrap_or(&0);
        let mut rng = seed::rng_for(seed::record_seed(stage_seed, &format!("split/{score}")));
        out.extend(
            sample_without_replacement(bucket, take, &mut rng)
                .into_iter()
                .cloned(),
        );
    }
    out.sort_by(|a, b| {
        (a.good.score, &a.instance.source_dataset, &a.instance.id).cmp(&(
            b.good.score,
            &b.instance.source_dataset,
            &b.instance.id,
        ))
    });
    out
}

/// Per-score counts of a record list.
pub fn score_histogram(records: &[SelectedRecord]) -> [usize; 5] {
    let mut hist = [0usize; 5];
    for r in records {
        hist[(r.good.score - 1) as usize] += 1;
    }
    hist
}
