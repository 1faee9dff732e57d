use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tdm_core::imputer::{Mode, SolverChoice, TrainConfig};
use tdm_core::inn::DEFAULT_CLAMP;
use tdm_core::mask::{DEFAULT_OBSERVED_FRACTION, DEFAULT_QUANTILE_P, DEFAULT_RATE};
use tdm_core::{Mechanism, SynthKind};

#[derive(Debug, Parser)]
#[command(name = "tdm", version, about = "Missing-value imputation by transformed distribution matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset
    Synth(SynthArgs),
    /// Hide cells of a complete dataset under a missingness mechanism
    Mask(MaskArgs),
    /// Fill the missing (NaN) cells of a dataset
    Impute(ImputeArgs),
    /// Score an imputation against the ground truth
    Eval(EvalArgs),
    /// Run the theory checks
    Check(CheckArgs),
    /// Mask, impute with both methods and score, over mechanisms and seeds
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Single-threaded, with runtimes reported as zero, so that repeated runs
    /// produce byte-identical files
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KindArg {
    TwoCircles,
    SCurve,
    HalfMoons,
    SeedsLike,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::TwoCircles => SynthKind::TwoCircles,
            KindArg::SCurve => SynthKind::SCurve,
            KindArg::HalfMoons => SynthKind::HalfMoons,
            KindArg::SeedsLike => SynthKind::SeedsLike,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also hide one coordinate in this fraction of rows (writes mask.csv
    /// and masked.csv)
    #[arg(long)]
    pub missing_rows: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MechanismArg {
    Mcar,
    Mar,
    Mnarl,
    Mnarq,
}

impl From<MechanismArg> for Mechanism {
    fn from(m: MechanismArg) -> Self {
        match m {
            MechanismArg::Mcar => Mechanism::Mcar,
            MechanismArg::Mar => Mechanism::Mar,
            MechanismArg::Mnarl => Mechanism::Mnarl,
            MechanismArg::Mnarq => Mechanism::Mnarq,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MaskShapeArgs {
    #[arg(long, default_value_t = DEFAULT_RATE)]
    pub rate: f64,
    /// Share of columns kept fully observed (MAR) or used as logistic inputs
    /// (MNAR logistic)
    #[arg(long, default_value_t = DEFAULT_OBSERVED_FRACTION)]
    pub observed_fraction: f64,
    /// Tail percentile for quantile MNAR
    #[arg(long, default_value_t = DEFAULT_QUANTILE_P)]
    pub quantile: f64,
}

#[derive(Debug, Clone, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "mcar")]
    pub mechanism: MechanismArg,
    #[command(flatten)]
    pub shape: MaskShapeArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Tdm,
    Baseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Tdm => Mode::Tdm,
            ModeArg::Baseline => Mode::BaselineIdentity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Exact,
    Sinkhorn,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "tdm")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "exact")]
    pub solver: SolverArg,
    /// Entropic regularisation for Sinkhorn; defaults to 5% of the median
    /// pairwise squared distance
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Number of coupling blocks
    #[arg(long = "T", default_value_t = 3)]
    pub blocks: usize,
    /// Subnet width multiplier
    #[arg(long = "K", default_value_t = 2)]
    pub hidden_factor: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Record progress every this many iterations (0 disables)
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        let solver = match self.solver {
            SolverArg::Exact => SolverChoice::ExactAssignment,
            SolverArg::Sinkhorn => SolverChoice::sinkhorn(self.epsilon),
        };
        TrainConfig {
            batch_size: self.batch_size,
            iterations: self.iters,
            lr: self.lr,
            blocks: self.blocks,
            hidden_factor: self.hidden_factor,
            clamp: DEFAULT_CLAMP,
            solver,
            mode: self.mode.into(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            train_transform: true,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ImputeArgs {
    /// CSV with missing cells left empty or written as NaN
    #[arg(long)]
    pub input: PathBuf,
    /// Complete data; enables metrics in the manifest
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub imputed: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Largest row count for the W2 metric
    #[arg(long, default_value_t = tdm_core::metrics::DEFAULT_W22_MAX_N)]
    pub max_n: usize,
    #[arg(long)]
    pub output_dir: Option<std::path::PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    /// One of lemma1, union, prop4, prop2_prop3, gradients, or all
    #[arg(default_value = "all")]
    pub which: String,
    /// Instances (or Monte Carlo draws) per check; each check has its own
    /// default
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// Complete dataset to mask
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "mcar")]
    pub mechanisms: Vec<MechanismArg>,
    /// Number of seeds, counted up from --seed
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[command(flatten)]
    pub shape: MaskShapeArgs,
    #[arg(long, default_value_t = tdm_core::metrics::DEFAULT_W22_MAX_N)]
    pub max_n: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}
