//! The `ggem` command line: `gradcheck`, `train`, `analyze`, `pool` and
//! `retrieve`. Exit status is 0 on success, 1 when a check fails, 2 on
//! usage or input errors. Diagnostics go to stderr; data goes to files or
//! stdout.

mod activations;
mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};

pub use activations::{maps_from_container, maps_from_csv, read_activations, LabelledMaps};
pub use config::{DatasetSource, ExperimentConfig, CONFIG_KEYS};

/// Environment variable capping worker threads; 0 or unset means one per core.
pub const THREADS_ENV: &str = "GGEM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ggem", version, about = "GeM and group GeM pooling with a toy Vision Transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare every analytic gradient with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the toy ViT and write a checkpoint and a per-epoch trace.
    Train(TrainArgs),
    /// Inter-head CKA and attention mean distance for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Pool activation maps into descriptors.
    Pool(PoolArgs),
    /// Recall@K, R-Precision and mAP of query descriptors against a gallery.
    Retrieve(RetrieveArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// `synthetic` or an IDX image file.
    #[arg(long)]
    pub dataset: Option<String>,
    /// IDX label file for an IDX dataset.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSON report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scale the first query-weight gradient (negative control).
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Checkpoint path, or the output directory with --sweep.
    #[arg(long, default_value = "model.ggem")]
    pub out: PathBuf,
    /// Trace CSV path; defaults to the checkpoint path with a `.trace.csv` extension.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// `KEY=V1,V2,...`: one run per value. For `groups`, `H` and `D` stand
    /// for the head count and the embedding width.
    #[arg(long)]
    pub sweep: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `last`, `all`, or a comma-separated list of 0-based block indices.
    #[arg(long, default_value = "last")]
    pub blocks: String,
    /// Analyze at most this many images.
    #[arg(long)]
    pub images: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    /// Activation maps: CSV or GGEM container.
    #[arg(long)]
    pub input: PathBuf,
    /// cls, average, max, gem or ggem.
    #[arg(long, default_value = "ggem")]
    pub strategy: String,
    #[arg(long, default_value_t = 1)]
    pub groups: usize,
    /// Exponents: one value, or one per group.
    #[arg(long, value_delimiter = ',', default_value = "3")]
    pub p: Vec<f64>,
    #[arg(long, default_value_t = crate::tensor::DEFAULT_CLAMP_EPS)]
    pub clamp_eps: f64,
    /// Descriptor CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Query descriptor CSV.
    #[arg(long)]
    pub queries: PathBuf,
    /// Gallery descriptor CSV; the query set itself when omitted.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// cosine or euclidean.
    #[arg(long, default_value = "cosine")]
    pub metric: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub ks: Vec<usize>,
    /// Drop each query's own id from its ranking. Implied when the gallery
    /// is omitted.
    #[arg(long)]
    pub self_exclude: bool,
    /// JSON report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// How a successful run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::CheckFailed) | Err(Error::Diverged { .. }) => 1,
        Err(_) => 2,
    }
}

fn configure_threads() -> Result<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    // Fails only if a global pool already exists, e.g. on a second in-process run.
    if rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_err() {
        log::debug!("rayon pool already initialized");
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<Outcome> {
    configure_threads()?;
    match cli.command {
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Train(a) => commands::train(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Pool(a) => commands::pool(a),
        Command::Retrieve(a) => commands::retrieve(a),
    }
}

/// Parses `args` (including the program name), runs the command, reports
/// errors on stderr and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = execute(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}
