//! `curricode` command-line pipeline: obfuscate, build curricula, train,
//! evaluate, run the LLM study and aggregate reports.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use curricode_core::curriculum::CurriculumKind;
use curricode_core::llmeval::Protocol;
use curricode_core::metatrain::{MetaOrder, Schedule};

#[derive(Debug, Parser)]
#[command(name = "curricode", version, about = "Readability curricula for code summarization")]
pub struct Cli {
    /// TOML config file; top-level keys set global flags, `[<subcommand>]` tables set subcommand flags
    #[arg(long, global = true, env = "CURRICODE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run
    #[arg(long, global = true, env = "CURRICODE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Parent of per-run output directories, used when `--out` is absent
    #[arg(long, global = true, env = "CURRICODE_RUNS_DIR", default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Log more (repeat for debug output)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply one transform to every function of a JSONL corpus
    Obfuscate(ObfuscateArgs),
    /// Build and persist a three-level curriculum bundle
    Curriculum(CurriculumArgs),
    /// Train the summarizer over a bundle with one schedule
    Train(TrainArgs),
    /// Score predictions against references
    Evaluate(EvaluateArgs),
    /// Run the prompt-protocol study against a chat-completions endpoint
    Study(StudyArgs),
    /// Aggregate evaluations into a robustness table
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Fne,
    Irn,
    FneIrn,
    Dci,
}

#[derive(Debug, Args, Serialize)]
pub struct ObfuscateArgs {
    /// Transform to apply
    #[arg(long, env = "CURRICODE_TRANSFORM", value_enum, default_value = "fne-irn")]
    pub transform: TransformKind,
    /// Dead-code lines to inject (dci only)
    #[arg(long, env = "CURRICODE_LINES", default_value_t = 5)]
    pub lines: usize,
    /// Input corpus (JSONL with id, code, docstring)
    #[arg(long = "in", env = "CURRICODE_IN")]
    pub input: PathBuf,
    /// Output directory
    #[arg(long, env = "CURRICODE_OUT")]
    pub out: Option<PathBuf>,
    /// Drop functions the transform rejects instead of failing
    #[arg(long, env = "CURRICODE_LENIENT")]
    pub lenient: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct CurriculumArgs {
    /// Curriculum kind
    #[arg(long, env = "CURRICODE_KIND", default_value = "semantic-obfuscation")]
    #[serde(serialize_with = "as_display")]
    pub kind: CurriculumKind,
    /// Training corpus (JSONL)
    #[arg(long = "in", env = "CURRICODE_IN")]
    pub input: PathBuf,
    /// Output directory for the level files and audit
    #[arg(long, env = "CURRICODE_OUT")]
    pub out: Option<PathBuf>,
    /// Dead-code lines at the light level (semantic-interference)
    #[arg(long, env = "CURRICODE_LIGHT", default_value_t = 5)]
    pub light: usize,
    /// Dead-code lines at the heavy level (semantic-interference)
    #[arg(long, env = "CURRICODE_HEAVY", default_value_t = 10)]
    pub heavy: usize,
    /// Drop functions the transforms reject instead of failing
    #[arg(long, env = "CURRICODE_LENIENT")]
    pub lenient: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training schedule
    #[arg(long, env = "CURRICODE_SCHEDULE", default_value = "roft")]
    #[serde(serialize_with = "as_display")]
    pub schedule: Schedule,
    /// Training bundle directory (or level-file prefix)
    #[arg(long, env = "CURRICODE_BUNDLE")]
    pub bundle: PathBuf,
    /// Validation bundle used for checkpoint selection
    #[arg(long, env = "CURRICODE_VALID_BUNDLE")]
    pub valid_bundle: Option<PathBuf>,
    /// Output directory
    #[arg(long, env = "CURRICODE_OUT")]
    pub out: Option<PathBuf>,
    /// Learning rate of origin and baseline steps
    #[arg(long, env = "CURRICODE_ALPHA", default_value_t = 5e-5)]
    pub alpha: f64,
    /// Inner (support) learning rate of the meta step
    #[arg(long, env = "CURRICODE_BETA", default_value_t = 5e-5)]
    pub beta: f64,
    /// Outer (query) learning rate of the meta step
    #[arg(long, env = "CURRICODE_GAMMA", default_value_t = 5e-5)]
    pub gamma: f64,
    /// Examples per batch (even)
    #[arg(long, env = "CURRICODE_BATCH_SIZE", default_value_t = 64)]
    pub batch_size: usize,
    /// Passes over the training bundle
    #[arg(long, env = "CURRICODE_EPOCHS", default_value_t = 3)]
    pub epochs: usize,
    /// Weight decay on outer updates
    #[arg(long, env = "CURRICODE_WEIGHT_DECAY", default_value_t = 0.05)]
    pub weight_decay: f64,
    /// Also decay weights on the inner step
    #[arg(long, env = "CURRICODE_INNER_WEIGHT_DECAY")]
    pub inner_weight_decay: bool,
    /// Linear warmup steps [default: 0 for roft, 1000 otherwise]
    #[arg(long, env = "CURRICODE_WARMUP_STEPS")]
    pub warmup_steps: Option<usize>,
    /// Meta-gradient order
    #[arg(long, env = "CURRICODE_META_ORDER", default_value = "first-order")]
    #[serde(serialize_with = "as_display")]
    pub meta_order: MetaOrder,
    /// Stop after this many epochs without validation improvement
    #[arg(long, env = "CURRICODE_PATIENCE")]
    pub patience: Option<usize>,
    /// Embedding width
    #[arg(long, env = "CURRICODE_DIM", default_value_t = 16)]
    pub dim: usize,
    /// Hidden width
    #[arg(long, env = "CURRICODE_HIDDEN", default_value_t = 32)]
    pub hidden: usize,
    /// Minimum token count for the vocabulary
    #[arg(long, env = "CURRICODE_MIN_COUNT", default_value_t = 1)]
    pub min_count: usize,
    /// Vocabulary size cap
    #[arg(long, env = "CURRICODE_MAX_VOCAB")]
    pub max_vocab: Option<usize>,
    /// Record a parameter hash on every step
    #[arg(long, env = "CURRICODE_TRACE_PARAM_HASHES")]
    pub trace_param_hashes: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Trained run directory (with model.bin and vocab.json)
    #[arg(long, env = "CURRICODE_MODEL", requires = "bundle", conflicts_with = "predictions")]
    pub model: Option<PathBuf>,
    /// Bundle whose three levels are decoded and scored
    #[arg(long, env = "CURRICODE_BUNDLE")]
    pub bundle: Option<PathBuf>,
    /// Predictions JSONL (id, prediction)
    #[arg(long, env = "CURRICODE_PREDICTIONS", requires = "references")]
    pub predictions: Option<PathBuf>,
    /// References JSONL (id, docstring)
    #[arg(long, env = "CURRICODE_REFERENCES")]
    pub references: Option<PathBuf>,
    /// Embeddings JSONL (id, candidate, reference) for similarity
    #[arg(long, env = "CURRICODE_EMBEDDINGS")]
    pub embeddings: Option<PathBuf>,
    /// Level name for predictions mode
    #[arg(long, env = "CURRICODE_LEVEL", default_value = "origin")]
    pub level: String,
    /// Method name recorded in the evaluation [default: the trained schedule]
    #[arg(long, env = "CURRICODE_METHOD")]
    pub method: Option<String>,
    /// Output directory
    #[arg(long, env = "CURRICODE_OUT")]
    pub out: Option<PathBuf>,
    /// Print machine-readable JSON
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct StudyArgs {
    /// Bundle directory (or level-file prefix)
    #[arg(long, env = "CURRICODE_BUNDLE")]
    pub bundle: PathBuf,
    /// Protocols to run
    #[arg(long, env = "CURRICODE_PROTOCOLS", value_delimiter = ',', default_value = "zero-shot,few-shot,chain-of-thought,critique")]
    #[serde(serialize_with = "all_display")]
    pub protocols: Vec<Protocol>,
    /// Model name sent to the endpoint
    #[arg(long = "model-name", env = "CURRICODE_MODEL_NAME", default_value = "deepseek-chat")]
    pub model_name: String,
    /// Examples per level, from the front of the bundle
    #[arg(long, env = "CURRICODE_LIMIT", default_value_t = 2000)]
    pub limit: usize,
    /// Corpus JSONL providing few-shot exemplars (the first k are used)
    #[arg(long, env = "CURRICODE_FEWSHOT_FILE")]
    pub fewshot_file: Option<PathBuf>,
    /// Number of few-shot exemplars
    #[arg(long, env = "CURRICODE_FEWSHOTS", default_value_t = 3)]
    pub fewshots: usize,
    /// Shuffle the exemplar file with `--seed` before taking the first k
    #[arg(long, env = "CURRICODE_FEWSHOT_SHUFFLE")]
    pub fewshot_shuffle: bool,
    /// Maximum requests in flight
    #[arg(long, env = "CURRICODE_CONCURRENCY", default_value_t = 4)]
    pub concurrency: usize,
    /// Chat-completions base URL
    #[arg(long, env = "CURRICODE_LLM_ENDPOINT")]
    pub endpoint: String,
    /// Bearer token
    #[arg(long, env = "CURRICODE_LLM_API_KEY", hide_env_values = true)]
    #[serde(skip)]
    pub api_key: Option<String>,
    /// Response cache directory
    #[arg(long, env = "CURRICODE_LLM_CACHE")]
    pub cache_dir: Option<PathBuf>,
    /// Output directory
    #[arg(long, env = "CURRICODE_OUT")]
    pub out: Option<PathBuf>,
    /// Print machine-readable JSON
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Evaluation directories or evaluation.json files, one per method
    #[arg(long = "eval", env = "CURRICODE_EVAL", value_delimiter = ',', required = true)]
    pub evals: Vec<PathBuf>,
    /// Method used as the delta baseline [default: the first evaluation]
    #[arg(long, env = "CURRICODE_BASELINE")]
    pub baseline: Option<String>,
    /// Output directory
    #[arg(long, env = "CURRICODE_OUT")]
    pub out: Option<PathBuf>,
    /// Print machine-readable JSON
    #[arg(long)]
    pub json: bool,
}

fn as_display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn all_display<T: std::fmt::Display, S: serde::Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| x.to_string()))
}

/// Parses `argv`, runs the subcommand and returns the exit code:
/// 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let (cli, config_file) = match config::parse(&argv) {
        Ok(parsed) => parsed,
        Err(config::ParseFailure::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
        Err(config::ParseFailure::Config(msg)) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match commands::dispatch(&cli, config_file.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
