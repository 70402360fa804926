//! Command-line front end: argument parsing, file formats and the four
//! subcommands `train`, `infer`, `generate` and `eval`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vmfmix_core::InitStrategy;

pub mod commands;
pub mod error;
pub mod formats;

pub use error::{CliError, CliResult};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "VMFMIX_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "vmfmix",
    version,
    about = "Multi-document vMF mixture topic embeddings"
)]
pub struct Cli {
    /// Merge partial statistics in a fixed order (bit-reproducible output)
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a corpus
    Train(TrainArgs),
    /// Compute topic-proportion features with frozen models
    Infer(InferArgs),
    /// Sample a synthetic corpus and its latent variables
    Generate(GenerateArgs),
    /// Compare a fitted model with the truth behind a generated corpus
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus TSV
    pub corpus: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// random-directions, perturbed-global-mean or seeded-tokens
    #[arg(long, default_value_t = InitStrategy::SeededTokens)]
    pub init: InitStrategy,
    #[arg(long, default_value_t = 10.0)]
    pub kappa_init: f64,
    /// Independent initializations; the best final ELBO is kept
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
    /// Fit one model per document label; --out then names a manifest
    #[arg(long)]
    pub per_label: bool,
    /// Model file (or manifest with --per-label)
    #[arg(long)]
    pub out: PathBuf,
    /// ELBO trace CSV
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Corpus TSV
    pub corpus: PathBuf,
    /// Model file or manifest; repeat to combine models in order
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Feature TSV
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub max_sweeps: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub rel_tol: f64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub docs: usize,
    #[arg(long, default_value_t = 30)]
    pub tokens_min: usize,
    /// Defaults to --tokens-min
    #[arg(long)]
    pub tokens_max: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 50.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Label every document and prefix its id with `<label>-`
    #[arg(long)]
    pub label: Option<String>,
    /// Corpus TSV
    #[arg(long)]
    pub out: PathBuf,
    /// Truth TSV (components, θ and z)
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Model file holding the true parameters
    #[arg(long)]
    pub truth_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Fitted model file
    pub model: PathBuf,
    /// Truth TSV from `generate`
    pub truth: PathBuf,
    /// Corpus TSV from `generate`
    pub corpus: PathBuf,
    /// Print the report as JSON
    #[arg(long)]
    pub json: bool,
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "{THREADS_ENV} must be a non-negative integer, got '{raw}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train(a) => commands::train(&a, cli.deterministic),
        Command::Infer(a) => commands::infer(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Eval(a) => commands::eval(&a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
