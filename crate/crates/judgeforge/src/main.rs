//! judgeforge command-line interface.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use judgeforge::agreement::{report_render, score_benchmark, BenchmarkConfig, HumanScore, JudgeOutput};
use judgeforge::annotator::{annotate_corpus, AnnotatorClient, AnnotatorConfig};
use judgeforge::balance::{balance_scores, balanced_test_split, ScoreCaps};
use judgeforge::comparison::run_comparison;
use judgeforge::conf::Conf;
use judgeforge::corpus::Registry;
use judgeforge::emit::{emit_dpo, emit_mix_sft, emit_sft, Manifest};
use judgeforge::ingest::{corpus_stats, load_corpus, JoinedInstance, ParseMode};
use judgeforge::pipeline::{run_pipeline, PipelineConfig};
use judgeforge::selection::{run_selection, SelectedRecord};
use judgeforge::{seed, ComparisonRecord};

#[derive(Parser)]
#[command(name = "judgeforge", version, about = "Curation pipeline and agreement harness for multimodal evaluation data")]
struct Cli {
    /// Global seed for sampling stages.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Pipeline config file (used by `run`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Treat malformed input lines as fatal.
    #[arg(long, global = true, default_value_t = false)]
    strict: bool,
    /// Print the plan without writing anything (used by `run`).
    #[arg(long, global = true, default_value_t = false)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CorpusArgs {
    /// Instances file (one JSON object per line).
    #[arg(long)]
    instances: PathBuf,
    /// Judgments file (one JSON object per line).
    #[arg(long)]
    judgments: PathBuf,
    /// Registry file overriding the builtin dataset registry.
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and report ingestion counts.
    Validate(CorpusArgs),
    /// Print per-score / per-dataset / per-task statistics.
    Stats {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Emit the report as JSON instead of a text table.
        #[arg(long)]
        json: bool,
    },
    /// Generate candidate judgments via a chat-completions endpoint.
    /// Reads the [annotator] section of the --config file.
    Annotate {
        /// Instances file to annotate.
        #[arg(long)]
        instances: PathBuf,
        /// Output judgments file.
        #[arg(long)]
        out: PathBuf,
        /// Failures file (default `<out>.failures.jsonl`).
        #[arg(long)]
        failures: Option<PathBuf>,
        /// Directory of per-task template overrides.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Select one good judgment per instance.
    Select {
        /// Instances file.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ledger output (JSON).
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Downsample score buckets to caps.
    Balance {
        /// Selected-records file.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Caps file (`score=cap` lines); shipped filtered-corpus caps
        /// when omitted.
        #[arg(long)]
        caps: Option<PathBuf>,
    },
    /// Sample a balanced test split.
    Testsplit {
        /// Selected-records file.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build good-vs-bad comparison pairs.
    Compare {
        /// Selected-records file.
        #[arg(long)]
        selected: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Emit training files from curated records.
    Emit {
        /// Selected-records file (pointwise samples).
        #[arg(long)]
        selected: Option<PathBuf>,
        /// Comparison-records file (pairwise samples / preference pairs).
        #[arg(long)]
        comparisons: Option<PathBuf>,
        /// Write pointwise SFT samples here.
        #[arg(long)]
        sft: Option<PathBuf>,
        /// Write mixed pointwise+pairwise SFT samples here.
        #[arg(long)]
        mixsft: Option<PathBuf>,
        /// Write DPO preference pairs here.
        #[arg(long)]
        dpo: Option<PathBuf>,
    },
    /// Score a judge run against human references.
    Score {
        /// Human references file ({instance_id, human_score, dataset}).
        #[arg(long)]
        human: PathBuf,
        /// Judge outputs file ({instance_id, output_text}).
        #[arg(long)]
        judge: PathBuf,
        /// Benchmark map; builtin benchmark when omitted.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Report output (JSON); the text table prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "judge")]
        judge_name: String,
    },
    /// Run the full pipeline from a config file.
    Run,
}

fn load_registry(path: &Option<PathBuf>) -> Result<Registry> {
    Ok(match path {
        Some(p) => Registry::load(p).with_context(|| format!("loading registry {}", p.display()))?,
        None => Registry::builtin(),
    })
}

fn parse_mode(strict: bool) -> ParseMode {
    if strict {
        ParseMode::Strict
    } else {
        ParseMode::Lenient
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}:{}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn annotator_config_from(path: &Path) -> Result<AnnotatorConfig> {
    let conf = Conf::load(path)?;
    let mut config = AnnotatorConfig::default();
    if let Some(v) = conf.get("annotator", "endpoint_url") {
        config.endpoint_url = v.to_string();
    }
    if let Some(v) = conf.get("annotator", "model_name") {
        config.model_name = v.to_string();
    }
    if let Some(v) = conf.get("annotator", "api_key_env_var") {
        config.api_key_env_var = v.to_string();
    }
    if conf.get("annotator", "candidates_per_instance").is_some() {
        config.candidates_per_instance = conf.parse_value("annotator", "candidates_per_instance")?;
    }
    if conf.get("annotator", "temperature").is_some() {
        config.temperature = conf.parse_value("annotator", "temperature")?;
    }
    if conf.get("annotator", "max_retries").is_some() {
        config.max_retries = conf.parse_value("annotator", "max_retries")?;
    }
    if conf.get("annotator", "request_timeout_secs").is_some() {
        config.request_timeout_secs = conf.parse_value("annotator", "request_timeout_secs")?;
    }
    if conf.get("annotator", "in_flight").is_some() {
        config.in_flight = conf.parse_value("annotator", "in_flight")?;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Validate(args) => {
            let registry = load_registry(&args.registry)?;
            let (_, ledger) = load_corpus(
                &args.instances,
                &args.judgments,
                &registry,
                parse_mode(cli.strict),
            )?;
            println!("{}", serde_json::to_string_pretty(&ledger)?);
            Ok(0)
        }
        Command::Stats { corpus, json } => {
            let registry = load_registry(&corpus.registry)?;
            let (joined, _) = load_corpus(
                &corpus.instances,
                &corpus.judgments,
                &registry,
                parse_mode(cli.strict),
            )?;
            let stats = corpus_stats(joined);
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                print!("{}", stats.render_table());
            }
            Ok(0)
        }
        Command::Annotate {
            instances,
            out,
            failures,
            templates,
            registry,
        } => {
            let registry = load_registry(&registry)?;
            let config_path = cli
                .config
                .as_ref()
                .ok_or_else(|| ConfigError("annotate requires --config".to_string()))?;
            let config = annotator_config_from(config_path)?;
            let client = AnnotatorClient::new(config)?;
            let rows: Vec<serde_json::Value> = read_jsonl(&instances)?;
            let mut validated = Vec::new();
            for row in &rows {
                validated.push(judgeforge::validate_instance(row, &registry)?);
            }
            let failures_path =
                failures.unwrap_or_else(|| out.with_extension("failures.jsonl"));
            let stats = annotate_corpus(
                &client,
                &validated,
                templates.as_deref(),
                &out,
                &failures_path,
            )?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(0)
        }
        Command::Select {
            input,
            judgments,
            out,
            ledger,
            registry,
        } => {
            let registry = load_registry(&registry)?;
            let (joined, _) =
                load_corpus(&input, &judgments, &registry, parse_mode(cli.strict))?;
            let stage_seed = seed::stage_seed(cli.seed, "select");
            let (records, selection_ledger) = run_selection(joined, stage_seed);
            write_jsonl(&out, &records)?;
            if let Some(path) = ledger {
                write_json(&path, &selection_ledger)?;
            }
            eprintln!(
                "kept {} / {} (discarded {})",
                selection_ledger.kept, selection_ledger.input, selection_ledger.discarded
            );
            Ok(0)
        }
        Command::Balance { input, out, caps } => {
            let records: Vec<SelectedRecord> = read_jsonl(&input)?;
            let caps = match caps {
                Some(p) => ScoreCaps::load(&p)?,
                None => ScoreCaps::table2_filtered(),
            };
            let stage_seed = seed::stage_seed(cli.seed, "balance");
            let balanced = balance_scores(&records, &caps, stage_seed);
            write_jsonl(&out, &balanced)?;
            eprintln!("balanced {} -> {}", records.len(), balanced.len());
            Ok(0)
        }
        Command::Testsplit { input, n, out } => {
            let records: Vec<SelectedRecord> = read_jsonl(&input)?;
            let stage_seed = seed::stage_seed(cli.seed, "testsplit");
            let split = balanced_test_split(&records, n, stage_seed);
            write_jsonl(&out, &split)?;
            eprintln!("sampled {} of {}", split.len(), records.len());
            Ok(0)
        }
        Command::Compare {
            selected,
            judgments,
            out,
            ledger,
            instances,
            registry,
        } => {
            let registry = load_registry(&registry)?;
            let selected_records: Vec<SelectedRecord> = read_jsonl(&selected)?;
            let (joined, _) =
                load_corpus(&instances, &judgments, &registry, parse_mode(cli.strict))?;
            let by_id: BTreeMap<String, JoinedInstance> = joined
                .into_iter()
                .map(|j| (j.instance.id.clone(), j))
                .collect();
            let stage_seed = seed::stage_seed(cli.seed, "compare");
            let (pairs, comparison_ledger) =
                run_comparison(&selected_records, &by_id, stage_seed);
            write_jsonl(&out, &pairs)?;
            if let Some(path) = ledger {
                write_json(&path, &comparison_ledger)?;
            }
            eprintln!(
                "built {} pairs, discarded {}",
                comparison_ledger.built, comparison_ledger.discarded
            );
            Ok(0)
        }
        Command::Emit {
            selected,
            comparisons,
            sft,
            mixsft,
            dpo,
        } => {
            if sft.is_none() && mixsft.is_none() && dpo.is_none() {
                anyhow::bail!("emit: pass at least one of --sft, --mixsft, --dpo");
            }
            let selected_records: Option<Vec<SelectedRecord>> =
                selected.as_deref().map(read_jsonl).transpose()?;
            let comparison_records: Option<Vec<ComparisonRecord>> =
                comparisons.as_deref().map(read_jsonl).transpose()?;
            let manifest_base = Manifest::new(cli.seed, "emit");
            if let Some(path) = sft {
                let records = selected_records
                    .as_ref()
                    .context("--sft requires --selected")?;
                let n = emit_sft(records, &path)?;
                let mut manifest = manifest_base.clone();
                manifest.push_stage(
                    "emit_sft",
                    seed::stage_seed(cli.seed, "emit_sft"),
                    records.len(),
                    n,
                    None,
                );
                manifest.write_for(&path)?;
                eprintln!("sft: {n} lines");
            }
            if let Some(path) = mixsft {
                let records = selected_records
                    .as_ref()
                    .context("--mixsft requires --selected")?;
                let pairs = comparison_records
                    .as_ref()
                    .context("--mixsft requires --comparisons")?;
                let stage_seed = seed::stage_seed(cli.seed, "emit_mix_sft");
                let n = emit_mix_sft(records, pairs, &path, stage_seed)?;
                let mut manifest = manifest_base.clone();
                manifest.push_stage(
                    "emit_mix_sft",
                    stage_seed,
                    records.len() + pairs.len(),
                    n,
                    None,
                );
                manifest.write_for(&path)?;
                eprintln!("mix-sft: {n} lines");
            }
            if let Some(path) = dpo {
                let pairs = comparison_records
                    .as_ref()
                    .context("--dpo requires --comparisons")?;
                let n = emit_dpo(pairs, &path)?;
                let mut manifest = manifest_base.clone();
                manifest.push_stage(
                    "emit_dpo",
                    seed::stage_seed(cli.seed, "emit_dpo"),
                    pairs.len(),
                    n,
                    None,
                );
                manifest.write_for(&path)?;
                eprintln!("dpo: {n} pairs");
            }
            Ok(0)
        }
        Command::Score {
            human,
            judge,
            map,
            out,
            judge_name,
        } => {
            let humans: Vec<HumanScore> = read_jsonl(&human)?;
            let outputs: Vec<JudgeOutput> = read_jsonl(&judge)?;
            let config = match map {
                Some(p) => BenchmarkConfig::load(&p)?,
                None => BenchmarkConfig::builtin(),
            };
            let report = score_benchmark(&judge_name, &outputs, &humans, &config);
            print!("{}", report_render(&report));
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            Ok(0)
        }
        Command::Run => {
            let config_path = cli
                .config
                .ok_or_else(|| ConfigError("run requires --config".to_string()))?;
            let config = PipelineConfig::load(&config_path).map_err(config_or_fatal)?;
            let summary = run_pipeline(&config, cli.dry_run).map_err(config_or_fatal)?;
            if !cli.dry_run {
                print!("{}", summary.render());
            }
            Ok(0)
        }
    }
}

/// Marker for errors that should exit with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_or_fatal(e: judgeforge::pipeline::PipelineError) -> anyhow::Error {
    match e {
        judgeforge::pipeline::PipelineError::Config(msg) => ConfigError(msg).into(),
        other => anyhow::Error::new(other),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
