//! `refscale` command-line front end: argument definitions, run manifests and
//! one function per subcommand. Exit codes: 0 success, 1 runtime fault,
//! 2 usage or validation error.

pub mod manifest;

mod compare;
mod eval;
mod tools;
mod train;

use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use manifest::{CorpusSource, DataConfig, ModelRef, RunManifest, ScheduleConfig, OUTPUT_ROOT_ENV};
pub use train::{prepare, train, Prepared, TrainOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configs or inputs; nothing was run.
    #[error("{0}")]
    Usage(String),
    /// A run started and failed.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub(crate) fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub(crate) fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Writes `text` to `path` via temp file and rename, or to stdout.
pub(crate) fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    refscale::model::checkpoint::write_atomic(path, text.as_bytes()).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Positive finite number; accepts `1e12` style.
fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s} must be positive"))
    }
}

/// Positive integer; accepts `1e12` style when the value is integral.
fn count_u64(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.trim().parse::<u64>() {
        return Ok(v);
    }
    let v = positive_f64(s)?;
    if v.fract() != 0.0 || v > u64::MAX as f64 {
        return Err(format!("{s} is not an integer"));
    }
    Ok(v as u64)
}

#[derive(Debug, Parser)]
#[command(name = "refscale", version, about = "Reference pretraining and compute-aligned comparison")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect or generate token shards.
    #[command(subcommand)]
    Shard(ShardCmd),
    /// Generate evaluation task files.
    #[command(subcommand)]
    Task(TaskCmd),
    /// Train from a run manifest.
    Train(TrainArgs),
    /// Score checkpoints on multiple-choice tasks.
    Eval(EvalArgs),
    /// 6N / 6ND compute accounting.
    Ledger(LedgerArgs),
    /// Derive a learning-rate schedule and export its curve.
    Schedule(ScheduleArgs),
    /// Rank, trend or dominance reports over RunPoint files.
    Compare(CompareArgs),
    /// Architecture ablation runs from a manifest.
    Ablate(AblateArgs),
}

#[derive(Debug, Subcommand)]
pub enum ShardCmd {
    /// Validate a shard and print its header and statistics as JSON.
    Inspect { path: PathBuf },
    /// Write a synthetic Markov shard and its corpus manifest.
    Synth {
        #[arg(long, value_parser = count_u64)]
        tokens: u64,
        #[arg(long, default_value_t = 6)]
        fanout: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum TaskCmd {
    /// Write a synthetic multiple-choice task whose gold answer is marked.
    Synth {
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        choices: usize,
        #[arg(long, default_value_t = 0)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub manifest: PathBuf,
    /// Overrides the manifest seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the manifest run id.
    #[arg(long)]
    pub run_id: Option<String>,
    /// Overrides the manifest output directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides the schedule length.
    #[arg(long)]
    pub iters: Option<u64>,
    /// Stop after this iteration (default: end of schedule).
    #[arg(long)]
    pub stop: Option<u64>,
    /// Continue from a checkpoint of the same run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Replace outputs of an existing run with the same id.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A checkpoint file or a directory of `ckpt_*.rsck` files.
    pub checkpoint: PathBuf,
    /// Task JSONL files.
    #[arg(long = "task", required = true)]
    pub tasks: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Record JSONL destination (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training-dynamics CSV (default `<dir>/dynamics.csv` for directories).
    #[arg(long)]
    pub dynamics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Md,
    Json,
}

#[derive(Debug, Args)]
pub struct LedgerArgs {
    /// Total parameter count N.
    #[arg(value_parser = positive_f64, required_unless_present = "table")]
    pub params: Option<f64>,
    /// Training tokens D.
    #[arg(value_parser = positive_f64, required_unless_present = "table")]
    pub tokens: Option<f64>,
    /// JSONL rows with `params`, `tokens` and optional `gpus`, `tokens_per_gpu_s`.
    #[arg(long, conflicts_with_all = ["params", "tokens"])]
    pub table: Option<PathBuf>,
    #[arg(long, requires = "tokens_per_gpu_s")]
    pub gpus: Option<u64>,
    #[arg(long, value_parser = positive_f64, requires = "gpus")]
    pub tokens_per_gpu_s: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("kind").required(true).args(["wsd", "cosine"])))]
#[command(group(ArgGroup::new("length").required(true).args(["tokens", "iters"])))]
pub struct ScheduleArgs {
    #[arg(long)]
    pub wsd: bool,
    #[arg(long)]
    pub cosine: bool,
    /// Token budget; total iterations = ceil(tokens / gbs).
    #[arg(long, value_parser = count_u64, requires = "gbs")]
    pub tokens: Option<u64>,
    #[arg(long, value_parser = count_u64)]
    pub iters: Option<u64>,
    /// Global batch size in tokens.
    #[arg(long, value_parser = count_u64)]
    pub gbs: Option<u64>,
    #[arg(long, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, value_parser = count_u64, default_value_t = 0)]
    pub warmup: u64,
    /// Write the per-iteration curve as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompareMode {
    Rank,
    Trend,
    Flag,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(value_enum)]
    pub mode: CompareMode,
    /// RunPoint JSONL files.
    #[arg(required = true)]
    pub points: Vec<PathBuf>,
    /// Directory for the CSV, Markdown and SVG outputs.
    #[arg(long)]
    pub out: PathBuf,
    /// Score difference reported as a tie when ranking.
    #[arg(long, default_value_t = 0.001)]
    pub resolution: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub biases: bool,
    #[arg(long)]
    pub qk_norm: bool,
    #[arg(long)]
    pub dropout: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the schedule length of every arm.
    #[arg(long)]
    pub iters: Option<u64>,
    /// Output directory (default `<run dir>/ablation`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Shard(cmd) => tools::shard(cmd),
        Command::Task(cmd) => tools::task(cmd),
        Command::Train(args) => train::cmd_train(args),
        Command::Eval(args) => eval::cmd_eval(args),
        Command::Ledger(args) => tools::ledger(args),
        Command::Schedule(args) => tools::schedule(args),
        Command::Compare(args) => compare::cmd_compare(args),
        Command::Ablate(args) => train::cmd_ablate(args),
    }
}
