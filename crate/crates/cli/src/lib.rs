//! Command implementations behind the `arphmm` binary.
//!
//! Exit codes: 0 on success, 1 when inputs or options are invalid, 2 when a
//! valid run fails (no model could be fitted, empty library, I/O failure).

mod commands;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{decode, evaluate, predict, synth, train};

#[derive(Debug, Parser)]
#[command(
    name = "arphmm",
    version,
    about = "Autoregressive partially-hidden Markov models for prognostics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model per run-to-failure instance and save the library.
    Train(TrainArgs),
    /// Estimate the RUL of every test instance from a library.
    Predict(PredictArgs),
    /// Score predictions against true RULs.
    Evaluate(EvaluateArgs),
    /// Generate synthetic data, from a model file or as a degradation fleet.
    Synth(SynthArgs),
    /// Decode the state path and posteriors of one series.
    Decode(DecodeArgs),
}

/// EM options shared by the commands that fit models.
#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Number of hidden states.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Autoregressive order.
    #[arg(long, default_value_t = 7)]
    pub delta: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which EM stops.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    /// Covariance eigenvalue floor, relative to the data scale.
    #[arg(long, default_value_t = 1e-6)]
    pub sigma_floor: f64,
    /// Initialization of the first EM run (later runs are random).
    #[arg(long, default_value = "prior")]
    pub init: arphmm::InitStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorSource {
    /// All-ones weights.
    Vacuous,
    /// One-hot weights from each instance's labels file.
    Labels,
    /// Each instance's prior file.
    File,
    /// The first rows of each library entry's training prior (predict only).
    Training,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset manifest of run-to-failure instances (series with a rul column).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output library directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Training prior; defaults to labels when every instance has a labels
    /// file, vacuous otherwise.
    #[arg(long, value_enum)]
    pub prior: Option<PriorSource>,
    /// Corrupt the labels with this uncertainty level before training.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Exit with code 2 if any instance fails to fit.
    #[arg(long)]
    pub fail_on_any: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Fusion,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Weighting {
    Mean,
    Softmax,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub library: PathBuf,
    /// Dataset manifest of test sequences.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Predictions CSV: id,rul_hat,method,contributors.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value_t = Method::Fusion)]
    pub method: Method,
    #[arg(long, value_enum, default_value_t = PriorSource::Training)]
    pub prior: PriorSource,
    #[arg(long, value_enum, default_value_t = Weighting::Mean)]
    pub weighting: Weighting,
    /// Per-step trajectories of the direct method (default: next to --out).
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// CSV whose first two columns are id,rul_hat.
    #[arg(long)]
    pub predictions: PathBuf,
    /// CSV with columns id,true_rul.
    #[arg(long)]
    pub truth: PathBuf,
    /// Writes <out>.csv (id,true,hat,d,s,pct_err) and <out>.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Model file to sample from. Without it a staged degradation fleet is
    /// generated.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of sequences (model mode) or training units (fleet mode).
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Sequence length in model mode.
    #[arg(long, default_value_t = 200)]
    pub len: usize,
    /// Number of test units in fleet mode.
    #[arg(long, default_value_t = 5)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long, value_enum, default_value_t = PriorSource::Vacuous)]
    pub prior: PriorSource,
    /// Labels file for --prior labels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Prior file for --prior file.
    #[arg(long)]
    pub prior_file: Option<PathBuf>,
    /// Lifetime used to impute the RUL channel when the model was trained on
    /// [HI, RUL] and the series holds health indicators only. Defaults to the
    /// series' own lifetime when it carries a rul column.
    #[arg(long)]
    pub lifetime: Option<f64>,
    /// Output CSV: t,state,gamma_1..gamma_K (states numbered from 1).
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of a command, tagged with its exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn validation(msg: impl fmt::Display) -> Self {
        CliError::Validation(anyhow::anyhow!("{msg}"))
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        CliError::Runtime(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(e) | CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<arphmm::Error> for CliError {
    fn from(e: arphmm::Error) -> Self {
        use arphmm::Error::*;
        match e {
            Infeasible(_) | EmptyLibrary | InconsistentPrior { .. } | Io { .. } => CliError::Runtime(e.into()),
            _ => CliError::Validation(e.into()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => train(&a),
        Command::Predict(a) => predict(&a),
        Command::Evaluate(a) => evaluate(&a).map(|_| ()),
        Command::Synth(a) => synth(&a),
        Command::Decode(a) => decode(&a),
    }
}

/// Sizes the global thread pool from `ARPHMM_THREADS`, if set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("ARPHMM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::validation(format!("ARPHMM_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(CliError::runtime)
}
