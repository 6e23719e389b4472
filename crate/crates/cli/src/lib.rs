//! Command-line frontend: data generation, training, tracking, evaluation,
//! ablation sweeps and the gradient check.

pub mod commands;
pub mod config;
pub mod records;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "dmt", version, about = "Detector-free motion-prediction 3D single object tracker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tracklet file.
    GenData(GenDataArgs),
    /// Train the motion model, then the tracking network.
    Train(TrainArgs),
    /// Track every tracklet and write per-frame step reports.
    Track(TrackArgs),
    /// Score step reports against ground truth.
    Eval(EvalArgs),
    /// Run one ablation sweep.
    Ablate(AblateArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tracklets: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train only the LSTM motion model.
    #[arg(long, conflicts_with = "tracker_only")]
    pub mpm_only: bool,
    /// Skip the LSTM motion model.
    #[arg(long)]
    pub tracker_only: bool,
    /// Write a resumable checkpoint after every epoch.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint; the motion model stored in it is kept.
    #[arg(long, conflicts_with = "mpm_only")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    EvmOnly,
    MpmOnly,
    /// Always the first ground-truth box.
    Persistence,
    /// The ground truth itself.
    Oracle,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    pub mode: ModeArg,
    /// Include wall-clock step times, which makes output non-reproducible.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Line-delimited metric records, one per category and the mean.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// sample-dist, sample-count, template-strategy or mpm-variant.
    #[arg(long)]
    pub axis: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Table output.
    #[arg(long)]
    pub out: PathBuf,
    /// Training tracklets; generated from the config when absent.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Test tracklets; generated from the config when absent.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Trained model for axes that do not retrain; trained when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] dmt_core::Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    /// 1 usage or configuration, 2 data, 3 numerical check.
    pub fn exit_code(&self) -> i32 {
        use dmt_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Check(_) | CliError::Core(E::NonFinite(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a, stdout),
        Command::Train(a) => commands::train(&a, stdout),
        Command::Track(a) => commands::track(&a),
        Command::Eval(a) => commands::eval(&a, stdout),
        Command::Ablate(a) => commands::ablate(&a, stdout),
        Command::Gradcheck(a) => commands::gradcheck(&a, stdout),
    }
}

/// Caps the worker pool at `DMT_THREADS` when set.
pub fn init_threads() -> CliResult {
    let Ok(v) = std::env::var("DMT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("DMT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}
