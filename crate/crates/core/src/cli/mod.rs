//! `earnvol` command line.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numeric
//! failure (divergent training, failed gradient check).

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::adversary::{AttackMode, PerturbTarget};
use crate::dataset::SplitMode;
use crate::evaluator::EvalError;
use crate::model::Modality;
use crate::trainer::{OptimizerKind, TrainError};

pub use config::{EvalConfig, Part, RunConfig, SplitConfig, VolConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub(crate) fn invalid(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train { source, variant } if source.is_numeric() => {
                CliError::Numeric(format!("training {variant} model: {source}"))
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "earnvol",
    version,
    about = "Adversarially trained multimodal volatility regression on earnings calls"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-record work (1 = sequential)
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus as NDJSON
    Synth(SynthArgs),
    /// Compute post-call log-volatility labels from price CSVs
    Vol(VolArgs),
    /// Train a model and write its checkpoint and history
    Train(TrainArgs),
    /// Evaluate a checkpoint, clean and under attack
    Eval(EvalArgs),
    /// Attack every record and report per-record losses and perturbations
    Attack(AttackArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Train and evaluate audio-only, text-only and fused variants
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub q_max: Option<usize>,
    #[arg(long)]
    pub dt: Option<usize>,
    #[arg(long)]
    pub da: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub female_fraction: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Size of the female-only shift added to audio embeddings
    #[arg(long)]
    pub gender_shift: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args)]
pub struct VolArgs {
    /// `date,adj_close` CSV files, or directories of them; ticker = file stem
    #[arg(long, num_args = 1.., required = true, value_name = "PATH")]
    pub prices: Vec<PathBuf>,
    /// `ticker,call_date` CSV
    #[arg(long, value_name = "FILE")]
    pub calls: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Lower clamp on the standard deviation before taking its log
    #[arg(long)]
    pub vol_floor: Option<f64>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AttackFlags {
    /// Step size of each attack step (defaults to eps / 4)
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Perturbation kind
    #[arg(long, value_name = "adv|rand|none")]
    pub attack: Option<AttackMode>,
    /// Seed of the random-noise stream (defaults to --seed)
    #[arg(long)]
    pub attack_seed: Option<u64>,
    /// Which embeddings the perturbation may move
    #[arg(long, value_name = "both|text|audio")]
    pub perturb: Option<PerturbTarget>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    #[arg(long, value_name = "fused|text|audio")]
    pub modality: Option<Modality>,
    #[arg(long)]
    pub u_text: Option<usize>,
    #[arg(long)]
    pub u_audio: Option<usize>,
    #[arg(long)]
    pub u_fused: Option<usize>,
    #[arg(long)]
    pub attn_dim: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 coefficient
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight of the clean loss in [0, 1]
    #[arg(long)]
    pub clean_mix: Option<f64>,
    #[arg(long, value_name = "sgd|adam")]
    pub optimizer: Option<OptimizerKind>,
    /// Epochs without validation improvement before stopping (0 = never)
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SplitFlags {
    /// Train, validation and test fractions
    #[arg(
        long,
        value_delimiter = ',',
        num_args = 3,
        value_name = "TRAIN,VAL,TEST"
    )]
    pub split: Option<Vec<f64>>,
    #[arg(long, value_name = "stratified|chronological")]
    pub split_mode: Option<SplitMode>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Directory receiving `checkpoint.ndjson` and `history.csv`
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Attack radius used during training
    #[arg(long)]
    pub eps: Option<f64>,
    #[command(flatten)]
    pub attack: AttackFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub split: SplitFlags,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Attack radii to evaluate
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[command(flatten)]
    pub attack: AttackFlags,
    #[arg(long, value_name = "train|val|test|all")]
    pub part: Option<Part>,
    #[command(flatten)]
    pub split: SplitFlags,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AttackArgs {
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub eps: Option<f64>,
    #[command(flatten)]
    pub attack: AttackFlags,
    #[arg(long, value_name = "train|val|test|all")]
    pub part: Option<Part>,
    #[command(flatten)]
    pub split: SplitFlags,
    /// Per-record losses before and after the attack (CSV)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Perturbation matrices per record (NDJSON)
    #[arg(long, value_name = "FILE")]
    pub deltas: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Check every `stride`-th parameter coordinate
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Number of consecutive seeds to check, starting at --seed
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Attack radius used during training
    #[arg(long)]
    pub train_eps: Option<f64>,
    /// Attack radii to evaluate
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[command(flatten)]
    pub attack: AttackFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub split: SplitFlags,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
