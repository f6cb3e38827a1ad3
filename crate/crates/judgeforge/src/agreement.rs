//! Judge-human agreement: score extraction from free-form judge output,
//! Pearson product-moment correlation, and per-dataset aggregation into
//! the benchmark report.
//!
//! Extraction failures are dropped pairwise (never scored as zero) and
//! always reported. Zero-variance datasets are mathematically undefined
//! and excluded from the averages with a warning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conf::{Conf, ConfError};

#[derive(Debug, Error)]
pub enum AgreementError {
    #[error("length mismatch: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error(transparent)]
    Conf(#[from] ConfError),
    #[error("benchmark config: {0}")]
    BadBenchmark(String),
}

/// Inclusive score range accepted by extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: i32,
    pub max: i32,
}

impl Default for ScoreRange {
    fn default() -> Self {
        ScoreRange { min: 1, max: 5 }
    }
}

impl ScoreRange {
    fn contains(&self, v: i32) -> bool {
        (self.min..=self.max).contains(&v)
    }
}

/// Numeric tokens of `text` with their byte offsets: maximal runs of
/// digits and dots, with an attached leading minus sign.
fn numeric_tokens(text: &str) -> Vec<(usize, f64)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let starts_number = c.is_ascii_digit()
            || (c == '-'
                && i + 1 < bytes.len()
                && (bytes[i + 1] as char).is_ascii_digit()
                && (i == 0 || !(bytes[i - 1] as char).is_ascii_alphanumeric()));
        if !starts_number {
            i += 1;
            continue;
        }
        let start = i;
        if c == '-' {
            i += 1;
        }
        while i < bytes.len() {
            let c = bytes[i] as char;
            if c.is_ascii_digit() || c == '.' {
                i += 1;
            } else {
                break;
            }
        }
        let token = &text[start..i];
        if let Ok(v) = token.trim_end_matches('.').parse::<f64>() {
            out.push((start, v));
        }
    }
    out
}

/// Byte offset just past the last standalone, case-insensitive "score".
fn last_score_token_end(text: &str) -> Option<usize> {
    let lower = text.to_lowercase();
    let bytes = lower.as_bytes();
    let mut best = None;
    let mut from = 0;
    while let Some(pos) = lower[from..].find("score") {
        let abs = from + pos;
        let end = abs + "score".len();
        let left_ok = abs == 0 || !(bytes[abs - 1] as char).is_ascii_alphanumeric();
        let right_ok = end >= bytes.len() || !(bytes[end] as char).is_ascii_alphabetic();
        if left_ok && right_ok {
            best = Some(end);
        }
        from = abs + 1;
    }
    best
}

/// Extract an integer score from free-form judge output.
///
/// Rule: the first integer in range after the last standalone "score"
/// token; otherwise the last standalone integer within range anywhere in
/// the text; otherwise `None` (extraction failure). Non-integer numbers
/// and out-of-range values never match.
pub fn extract_score(output_text: &str, valid_range: ScoreRange) -> Option<i32> {
    let tokens = numeric_tokens(output_text);
    let as_valid_int = |v: f64| -> Option<i32> {
        (v.fract() == 0.0 && v.abs() <= i32::MAX as f64)
            .then_some(v as i32)
            .filter(|n| valid_range.contains(*n))
    };
    if let Some(anchor) = last_score_token_end(output_text) {
        if let Some(score) = tokens
            .iter()
            .filter(|(pos, _)| *pos >= anchor)
            .find_map(|&(_, v)| as_valid_int(v))
        {
            return Some(score);
        }
    }
    tokens.iter().rev().find_map(|&(_, v)| as_valid_int(v))
}

/// Kahan-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, value: f64) {
        let y = value - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pearson {
    Value(f64),
    /// Either variance is zero (or fewer than two pairs).
    Undefined,
}

impl Pearson {
    pub fn value(self) -> Option<f64> {
        match self {
            Pearson::Value(v) => Some(v),
            Pearson::Undefined => None,
        }
    }
}

/// Product-moment correlation, single pass with compensated co-moment
/// accumulation (Welford updates).
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<Pearson, AgreementError> {
    if x.len() != y.len() {
        return Err(AgreementError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < 2 {
        return Ok(Pearson::Undefined);
    }
    let mut mean_x = 0.0;
    let mut mean_y = 0.0;
    let mut m2x = KahanSum::default();
    let mut m2y = KahanSum::default();
    let mut cxy = KahanSum::default();
    for (i, (&xi, &yi)) in x.iter().zip(y).enumerate() {
        let n = (i + 1) as f64;
        let dx = xi - mean_x;
        mean_x += dx / n;
        let dy = yi - mean_y;
        mean_y += dy / n;
        m2x.add(dx * (xi - mean_x));
        m2y.add(dy * (yi - mean_y));
        cxy.add(dx * (yi - mean_y));
    }
    let vx = m2x.value();
    let vy = m2y.value();
    if vx <= 0.0 || vy <= 0.0 {
        return Ok(Pearson::Undefined);
    }
    let r = cxy.value() / (vx.sqrt() * vy.sqrt());
    // exactly affine data lands within accumulation error of the endpoint
    // (true deviation of rounded-affine inputs is O(eps^2)); snap it so
    // |r| = 1 holds exactly on affine pairs
    let snap = 64.0 * f64::EPSILON * (x.len() as f64).sqrt();
    let r = if 1.0 - r.abs() < snap { r.signum() } else { r };
    Ok(Pearson::Value(r.clamp(-1.0, 1.0)))
}

/// One judge output line: `{instance_id, output_text}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeOutput {
    pub instance_id: String,
    pub output_text: String,
}

/// One human reference line: `{instance_id, human_score, dataset}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HumanScore {
    pub instance_id: String,
    pub human_score: i32,
    pub dataset: String,
}

/// Benchmark structure: ordered dataset columns and which one is the
/// text-to-image dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Column order; includes the t2i dataset.
    pub datasets: Vec<String>,
    pub t2i_dataset: String,
    pub score_range: ScoreRange,
}

pub const DEFAULT_BENCHMARK_TEXT: &str = include_str!("../data/mllm_judge_benchmark.conf");

impl BenchmarkConfig {
    /// The shipped benchmark map: the fourteen judge datasets plus the
    /// t2i dataset, in report column order.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_BENCHMARK_TEXT).expect("builtin benchmark config is valid")
    }

    pub fn parse(text: &str) -> Result<Self, AgreementError> {
        let conf = Conf::parse(text)?;
        let datasets: Vec<String> = conf
            .require("benchmark", "datasets")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        let t2i_dataset = conf.require("benchmark", "t2i")?.to_string();
        if !datasets.contains(&t2i_dataset) {
            return Err(AgreementError::BadBenchmark(format!(
                "t2i dataset `{t2i_dataset}` is not in the dataset list"
            )));
        }
        let min: i32 = conf.parse_value("benchmark", "score_min").unwrap_or(1);
        let max: i32 = conf.parse_value("benchmark", "score_max").unwrap_or(5);
        Ok(Self {
            datasets,
            t2i_dataset,
            score_range: ScoreRange { min, max },
        })
    }

    pub fn load(path: &Path) -> Result<Self, AgreementError> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            AgreementError::Conf(ConfError::Io {
                path: path.display().to_string(),
                source,
            })
        })?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    /// Pearson-r scaled by 100, one decimal; `None` when undefined.
    pub pearson_r_x100: Option<f64>,
    pub pairs_used: usize,
    pub extraction_failures: usize,
}

/// Per-dataset Pearson-r values plus the three aggregate columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub judge_name: String,
    pub per_dataset: Vec<DatasetScore>,
    /// Mean over the non-t2i datasets.
    pub judge_ave: Option<f64>,
    /// The t2i dataset's value.
    pub t2i: Option<f64>,
    /// Mean over all datasets.
    pub all_ave: Option<f64>,
    pub extraction_failures: usize,
    pub warnings: Vec<String>,
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Aggregate ordered per-dataset values (already scaled x100) into the
/// judge / t2i / all averages. `is_t2i[i]` marks the t2i column(s).
/// Undefined datasets are skipped.
pub fn aggregate(values: &[Option<f64>], is_t2i: &[bool]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let mut judge = Vec::new();
    let mut t2i = None;
    let mut all = Vec::new();
    for (v, &flag) in values.iter().zip(is_t2i) {
        let Some(v) = *v else { continue };
        all.push(v);
        if flag {
            t2i = Some(v);
        } else {
            judge.push(v);
        }
    }
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| round1(xs.iter().sum::<f64>() / xs.len() as f64));
    (mean(&judge), t2i, mean(&all))
}

/// Score a judge run against human references.
///
/// Instances whose judge output fails extraction are dropped pairwise and
/// counted. Datasets with fewer than two valid pairs, or zero variance,
/// report as undefined and are excluded from the averages with a warning.
pub fn score_benchmark(
    judge_name: &str,
    judge_run: &[JudgeOutput],
    human_scores: &[HumanScore],
    config: &BenchmarkConfig,
) -> AgreementReport {
    let judge_by_id: BTreeMap<&str, &JudgeOutput> = judge_run
        .iter()
        .map(|j| (j.instance_id.as_str(), j))
        .collect();

    struct Bucket {
        judge: Vec<f64>,
        human: Vec<f64>,
        failures: usize,
    }
    let mut buckets: BTreeMap<&str, Bucket> = BTreeMap::new();
    let mut warnings = Vec::new();
    for h in human_scores {
        if !config.datasets.iter().any(|d| d == &h.dataset) {
            warnings.push(format!(
                "instance `{}` maps to dataset `{}` not in the benchmark; ignored",
                h.instance_id, h.dataset
            ));
            continue;
        }
        let bucket = buckets.entry(h.dataset.as_str()).or_insert(Bucket {
            judge: Vec::new(),
            human: Vec::new(),
            failures: 0,
        });
        let Some(out) = judge_by_id.get(h.instance_id.as_str()) else {
            bucket.failures += 1;
            continue;
        };
        match extract_score(&out.output_text, config.score_range) {
            Some(score) => {
                bucket.judge.push(score as f64);
                bucket.human.push(h.human_score as f64);
            }
            None => bucket.failures += 1,
        }
    }

    let mut per_dataset = Vec::new();
    let mut total_failures = 0;
    for name in &config.datasets {
        let (value, pairs, failures) = match buckets.get(name.as_str()) {
            Some(b) if b.judge.len() >= 2 => {
                let r = pearson_r(&b.judge, &b.human).expect("equal lengths by construction");
                let v = match r {
                    Pearson::Value(v) => Some(round1(100.0 * v)),
                    Pearson::Undefined => {
                        warnings.push(format!(
                            "dataset `{name}`: zero variance, pearson-r undefined; excluded from averages"
                        ));
                        None
                    }
                };
                (v, b.judge.len(), b.failures)
            }
            Some(b) => {
                warnings.push(format!(
                    "dataset `{name}`: only {} valid pairs (<2); excluded from averages",
                    b.judge.len()
                ));
                (None, b.judge.len(), b.failures)
            }
            None => {
                warnings.push(format!("dataset `{name}`: no instances in the run"));
                (None, 0, 0)
            }
        };
        total_failures += failures;
        per_dataset.push(DatasetScore {
            dataset: name.clone(),
            pearson_r_x100: value,
            pairs_used: pairs,
            extraction_failures: failures,
        });
    }

    let values: Vec<Option<f64>> = per_dataset.iter().map(|d| d.pearson_r_x100).collect();
    let is_t2i: Vec<bool> = per_dataset
        .iter()
        .map(|d| d.dataset == config.t2i_dataset)
        .collect();
    let (judge_ave, t2i, all_ave) = aggregate(&values, &is_t2i);

    AgreementReport {
        judge_name: judge_name.to_string(),
        per_dataset,
        judge_ave,
        t2i,
        all_ave,
        extraction_failures: total_failures,
        warnings,
    }
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.1}"),
        None => "n/a".to_string(),
    }
}

/// Aligned text table over the configured dataset order, with the three
/// aggregate columns appended.
pub fn report_render(report: &AgreementReport) -> String {
    let mut header = String::from("judge");
    let mut row = report.judge_name.clone();
    let width = |s: &str| s.len().max(6) + 2;
    for d in &report.per_dataset {
        let w = width(&d.dataset);
        write!(header, "{:>w$}", d.dataset, w = w).unwrap();
        write!(row, "{:>w$}", cell(d.pearson_r_x100), w = w).unwrap();
    }
    for (name, v) in [
        ("Ave.", report.judge_ave),
        ("T2I", report.t2i),
        ("AllAve.", report.all_ave),
    ] {
        let w = width(name);
        write!(header, "{:>w$}", name, w = w).unwrap();
        write!(row, "{:>w$}", cell(v), w = w).unwrap();
    }
    let mut out = format!("{header}\n{row}\n");
    if report.extraction_failures > 0 {
        writeln!(out, "extraction failures: {}", report.extraction_failures).unwrap();
    }
    for warning in &report.warnings {
        writeln!(out, "warning: {warning}").unwrap();
    }
    out
}
