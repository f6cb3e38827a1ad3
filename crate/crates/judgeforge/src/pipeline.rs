//! End-to-end pipeline: validate -> select -> balance -> compare ->
//! emit (sft, mix-sft, dpo), with manifests next to every artifact.
//!
//! One global seed drives the run; each stage derives its own sub-seed,
//! so a stage rerun in isolation reproduces the full-run behavior.
//! Artifacts are written under `<name>.partial` and renamed into place on
//! stage success; a failed stage leaves earlier artifacts intact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::balance::{balance_scores, score_histogram, BalanceError, ScoreCaps};
use crate::comparison::run_comparison;
use crate::conf::Conf;
use crate::corpus::Registry;
use crate::emit::{emit_dpo, emit_mix_sft, emit_sft, EmitError, Manifest};
use crate::ingest::{load_corpus, IngestError, JoinedInstance, ParseMode};
use crate::seed;
use crate::selection::run_selection;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
}

impl PipelineError {
    fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        PipelineError::Stage {
            stage: stage.to_string(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub instances: PathBuf,
    pub judgments: PathBuf,
    pub out_dir: PathBuf,
    pub caps: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub strict: bool,
    /// Raw config text, hashed into the manifest.
    pub config_text: String,
}

impl PipelineConfig {
    /// Load from a sectioned key-value file:
    ///
    /// ```text
    /// [pipeline]
    /// seed = 42
    /// out_dir = out
    /// [inputs]
    /// instances = instances.jsonl
    /// judgments = judgments.jsonl
    /// [balance]
    /// caps = caps.conf        # optional; shipped caps otherwise
    /// [validate]
    /// registry = registry.conf # optional; builtin otherwise
    /// strict = false
    /// ```
    ///
    /// Relative paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let conf = Conf::parse(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |s: &str| {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let seed: u64 = conf
            .parse_value("pipeline", "seed")
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let out_dir = resolve(
            conf.require("pipeline", "out_dir")
                .map_err(|e| PipelineError::Config(e.to_string()))?,
        );
        let instances = resolve(
            conf.require("inputs", "instances")
                .map_err(|e| PipelineError::Config(e.to_string()))?,
        );
        let judgments = resolve(
            conf.require("inputs", "judgments")
                .map_err(|e| PipelineError::Config(e.to_string()))?,
        );
        let caps = conf.get("balance", "caps").map(resolve);
        let registry = conf.get("validate", "registry").map(resolve);
        let strict = conf
            .get("validate", "strict")
            .map(|v| v == "true" || v == "1")
            .unwrap_or(false);
        Ok(Self {
            seed,
            instances,
            judgments,
            out_dir,
            caps,
            registry,
            strict,
            config_text: text,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub validated: usize,
    pub selected: usize,
    pub balanced: usize,
    pub pairs: usize,
    pub sft_lines: usize,
    pub mix_sft_lines: usize,
    pub dpo_lines: usize,
    pub artifacts: Vec<PathBuf>,
}

impl PipelineSummary {
    /// One line per stage, in the shape of the data-size ablation rows.
    pub fn render(&self) -> String {
        format!(
            "stage sizes: validated {} -> selected {} -> balanced {} -> pairs {}\n\
             artifacts: sft {} lines, mix-sft {} lines, dpo {} lines\n",
            self.validated,
            self.selected,
            self.balanced,
            self.pairs,
            self.sft_lines,
            self.mix_sft_lines,
            self.dpo_lines
        )
    }
}

/// The stage plan, in execution order.
pub const STAGES: [&str; 7] = [
    "validate",
    "select",
    "balance",
    "compare",
    "emit_sft",
    "emit_mix_sft",
    "emit_dpo",
];

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T], stage: &str) -> Result<(), PipelineError> {
    let partial = path.with_extension("jsonl.partial");
    {
        let file =
            File::create(&partial).map_err(|e| PipelineError::stage(stage, e))?;
        let mut out = BufWriter::new(file);
        for row in rows {
            serde_json::to_writer(&mut out, row).map_err(|e| PipelineError::stage(stage, e))?;
            out.write_all(b"\n").map_err(|e| PipelineError::stage(stage, e))?;
        }
        out.flush().map_err(|e| PipelineError::stage(stage, e))?;
    }
    std::fs::rename(&partial, path).map_err(|e| PipelineError::stage(stage, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: &str) -> Result<(), PipelineError> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| PipelineError::stage(stage, e))?;
    std::fs::write(path, text + "\n").map_err(|e| PipelineError::stage(stage, e))
}

/// Execute the full pipeline. With `dry_run`, print the stage plan and
/// write nothing.
pub fn run_pipeline(
    config: &PipelineConfig,
    dry_run: bool,
) -> Result<PipelineSummary, PipelineError> {
    if dry_run {
        println!("dry run: stage plan");
        for (i, stage) in STAGES.iter().enumerate() {
            println!("  {}. {stage} (seed {})", i + 1, seed::stage_seed(config.seed, stage));
        }
        println!("  inputs: {} + {}", config.instances.display(), config.judgments.display());
        println!("  out_dir: {} (nothing written)", config.out_dir.display());
        return Ok(PipelineSummary {
            validated: 0,
            selected: 0,
            balanced: 0,
            pairs: 0,
            sft_lines: 0,
            mix_sft_lines: 0,
            dpo_lines: 0,
            artifacts: Vec::new(),
        });
    }

    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| PipelineError::stage("validate", format!("cannot create out_dir: {e}")))?;
    let registry = match &config.registry {
        Some(path) => {
            Registry::load(path).map_err(|e| PipelineError::stage("validate", e))?
        }
        None => Registry::builtin(),
    };
    let mut manifest = Manifest::new(config.seed, &config.config_text);
    let mut artifacts = Vec::new();

    // validate + join
    let mode = if config.strict {
        ParseMode::Strict
    } else {
        ParseMode::Lenient
    };
    let (corpus, ingest_ledger) = load_corpus(&config.instances, &config.judgments, &registry, mode)
        .map_err(|e: IngestError| PipelineError::stage("validate", e))?;
    let validated = corpus.len();
    manifest.push_stage("validate", config.seed, validated, validated, None);
    let ledger_path = config.out_dir.join("ingest_ledger.json");
    write_json(&ledger_path, &ingest_ledger, "validate")?;
    artifacts.push(ledger_path);

    // select
    let select_seed = seed::stage_seed(config.seed, "select");
    let by_id: BTreeMap<String, JoinedInstance> = corpus
        .iter()
        .map(|j| (j.instance.id.clone(), j.clone()))
        .collect();
    let (selected, selection_ledger) = run_selection(corpus, select_seed);
    manifest.push_stage(
        "select",
        select_seed,
        validated,
        selected.len(),
        Some(score_histogram(&selected)),
    );
    let selected_path = config.out_dir.join("selected.jsonl");
    write_jsonl(&selected_path, &selected, "select")?;
    manifest.write_for(&selected_path).map_err(|e| PipelineError::stage("select", e))?;
    let ledger_path = config.out_dir.join("selection_ledger.json");
    write_json(&ledger_path, &selection_ledger, "select")?;
    artifacts.push(selected_path);

    // balance; a missing caps file fails here, with the artifacts of the
    // earlier stages already in place
    let caps = match &config.caps {
        Some(path) => ScoreCaps::load(path)
            .map_err(|e: BalanceError| PipelineError::stage("balance", e))?,
        None => ScoreCaps::table2_filtered(),
    };
    let balance_seed = seed::stage_seed(config.seed, "balance");
    let balanced = balance_scores(&selected, &caps, balance_seed);
    manifest.push_stage(
        "balance",
        balance_seed,
        selected.len(),
        balanced.len(),
        Some(score_histogram(&balanced)),
    );
    let balanced_path = config.out_dir.join("balanced.jsonl");
    write_jsonl(&balanced_path, &balanced, "balance")?;
    manifest.write_for(&balanced_path).map_err(|e| PipelineError::stage("balance", e))?;
    artifacts.push(balanced_path);

    // compare
    let compare_seed = seed::stage_seed(config.seed, "compare");
    let (pairs, comparison_ledger) = run_comparison(&balanced, &by_id, compare_seed);
    manifest.push_stage("compare", compare_seed, balanced.len(), pairs.len(), None);
    let pairs_path = config.out_dir.join("comparisons.jsonl");
    write_jsonl(&pairs_path, &pairs, "compare")?;
    manifest.write_for(&pairs_path).map_err(|e| PipelineError::stage("compare", e))?;
    let ledger_path = config.out_dir.join("comparison_ledger.json");
    write_json(&ledger_path, &comparison_ledger, "compare")?;
    artifacts.push(pairs_path);

    // emit
    let sft_path = config.out_dir.join("sft.jsonl");
    let sft_partial = sft_path.with_extension("jsonl.partial");
    let sft_lines = emit_sft(&balanced, &sft_partial)
        .map_err(|e: EmitError| PipelineError::stage("emit_sft", e))?;
    std::fs::rename(&sft_partial, &sft_path).map_err(|e| PipelineError::stage("emit_sft", e))?;
    manifest.push_stage(
        "emit_sft",
        seed::stage_seed(config.seed, "emit_sft"),
        balanced.len(),
        sft_lines,
        Some(score_histogram(&balanced)),
    );
    manifest.write_for(&sft_path).map_err(|e| PipelineError::stage("emit_sft", e))?;
    artifacts.push(sft_path);

    let mix_seed = seed::stage_seed(config.seed, "emit_mix_sft");
    let mix_path = config.out_dir.join("mix_sft.jsonl");
    let mix_partial = mix_path.with_extension("jsonl.partial");
    let mix_sft_lines = emit_mix_sft(&balanced, &pairs, &mix_partial, mix_seed)
        .map_err(|e| PipelineError::stage("emit_mix_sft", e))?;
    std::fs::rename(&mix_partial, &mix_path)
        .map_err(|e| PipelineError::stage("emit_mix_sft", e))?;
    manifest.push_stage(
        "emit_mix_sft",
        mix_seed,
        balanced.len() + pairs.len(),
        mix_sft_lines,
        None,
    );
    manifest.write_for(&mix_path).map_err(|e| PipelineError::stage("emit_mix_sft", e))?;
    artifacts.push(mix_path);

    let dpo_path = config.out_dir.join("dpo.jsonl");
    let dpo_partial = dpo_path.with_extension("jsonl.partial");
    let dpo_lines =
        emit_dpo(&pairs, &dpo_partial).map_err(|e| PipelineError::stage("emit_dpo", e))?;
    std::fs::rename(&dpo_partial, &dpo_path).map_err(|e| PipelineError::stage("emit_dpo", e))?;
    manifest.push_stage(
        "emit_dpo",
        seed::stage_seed(config.seed, "emit_dpo"),
        pairs.len(),
        dpo_lines,
        None,
    );
    manifest.write_for(&dpo_path).map_err(|e| PipelineError::stage("emit_dpo", e))?;
    artifacts.push(dpo_path);

    debug_assert!(manifest.counts_consistent());

    Ok(PipelineSummary {
        validated,
        selected: selected.len(),
        balanced: balanced.len(),
        pairs: pairs.len(),
        sft_lines,
        mix_sft_lines,
        dpo_lines,
        artifacts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, write_corpus_files, SynthSpec};

    fn setup_corpus(dir: &Path, total: usize, seed: u64) -> (PathBuf, PathBuf) {
        let registry = Registry::builtin();
        let corpus = generate(&SynthSpec::small_mixed(total), &registry, seed);
        let instances = dir.join("instances.jsonl");
        let judgments = dir.join("judgments.jsonl");
        write_corpus_files(&corpus, &instances, &judgments).unwrap();
        (instances, judgments)
    }

    fn config_for(dir: &Path, instances: &Path, judgments: &Path, seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            instances: instances.to_path_buf(),
            judgments: judgments.to_path_buf(),
            out_dir: dir.join("out"),
            caps: None,
            registry: None,
            strict: false,
            config_text: format!("seed={seed}"),
        }
    }

    #[test]
    fn pipeline_produces_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let (instances, judgments) = setup_corpus(dir.path(), 300, 1);
        let config = config_for(dir.path(), &instances, &judgments, 42);
        let summary = run_pipeline(&config, false).unwrap();
        assert_eq!(summary.validated, 300);
        assert!(summary.selected > 0 && summary.selected <= 300);
        assert_eq!(summary.sft_lines, summary.balanced);
        assert_eq!(summary.mix_sft_lines, summary.balanced + summary.pairs);
        assert_eq!(summary.dpo_lines, summary.pairs);
        for name in [
            "selected.jsonl",
            "balanced.jsonl",
            "comparisons.jsonl",
            "sft.jsonl",
            "mix_sft.jsonl",
            "dpo.jsonl",
        ] {
            let p = config.out_dir.join(name);
            assert!(p.exists(), "{name} missing");
            assert!(
                crate::emit::manifest_path(&p).exists() || name.ends_with("ledger.json"),
                "{name} manifest missing"
            );
        }
        // no stray partials after success
        let partials: Vec<_> = std::fs::read_dir(&config.out_dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().to_string_lossy().ends_with(".partial"))
            .collect();
        assert!(partials.is_empty());
    }

    #[test]
    fn dry_run_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let (instances, judgments) = setup_corpus(dir.path(), 50, 2);
        let config = config_for(dir.path(), &instances, &judgments, 42);
        run_pipeline(&config, true).unwrap();
        assert!(!config.out_dir.exists());
    }

    #[test]
    fn missing_caps_file_fails_at_balance_with_earlier_artifacts_intact() {
        let dir = tempfile::tempdir().unwrap();
        let (instances, judgments) = setup_corpus(dir.path(), 50, 3);
        let mut config = config_for(dir.path(), &instances, &judgments, 42);
        config.caps = Some(dir.path().join("nonexistent.caps"));
        let err = run_pipeline(&config, false).unwrap_err();
        assert!(matches!(err, PipelineError::Stage { ref stage, .. } if stage == "balance"));
        assert!(config.out_dir.join("selected.jsonl").exists());
        assert!(!config.out_dir.join("balanced.jsonl").exists());
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let text = "[pipeline]\nseed = 7\nout_dir = out\n[inputs]\ninstances = i.jsonl\njudgments = j.jsonl\n";
        let path = dir.path().join("run.conf");
        std::fs::write(&path, text).unwrap();
        let config = PipelineConfig::load(&path).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.instances, dir.path().join("i.jsonl"));
        assert!(!config.strict);

        std::fs::write(&path, "[pipeline]\nseed = x\n").unwrap();
        assert!(matches!(
            PipelineConfig::load(&path),
            Err(PipelineError::Config(_))
        ));
    }
}
