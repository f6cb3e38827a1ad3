//! judgeforge: a curation pipeline and agreement harness for multimodal
//! evaluation data.
//!
//! The pipeline ingests evaluation instances with machine-generated
//! candidate judgments, selects one good judgment per instance (by human
//! score when available, by candidate-score mode otherwise), balances the
//! score distribution by capped stratified downsampling, builds
//! good-vs-bad comparison pairs, and emits SFT / mix-SFT / DPO training
//! files with reproducibility manifests. The agreement harness extracts
//! scores from judge output and reports per-dataset Pearson-r against
//! human scores with the judge / t2i / all averages.
//!
//! Every sampling step derives its RNG from `(seed, stage, record id)`,
//! so runs are byte-reproducible and order-independent.

pub mod agreement;
pub mod annotator;
pub mod balance;
pub mod comparison;
pub mod conf;
pub mod corpus;
pub mod emit;
pub mod ingest;
pub mod pipeline;
pub mod seed;
pub mod selection;
pub mod synth;

pub use agreement::{extract_score, pearson_r, score_benchmark, AgreementReport, Pearson};
pub use balance::{balance_scores, balanced_test_split, ScoreCaps};
pub use comparison::{build_comparison, run_comparison, ComparisonRecord};
pub use corpus::{
    normalize_score, validate_instance, CandidateJudgment, EvalInstance, Registry,
};
pub use emit::{emit_dpo, emit_mix_sft, emit_sft, Manifest, PreferencePair};
pub use ingest::{corpus_stats, load_corpus, JoinedInstance, StatsReport};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineSummary};
pub use selection::{human_select, mode_select, run_selection, SelectedRecord};
