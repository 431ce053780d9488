use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Outlier robust adversarial training on MLPs.
///
/// Exit codes: 0 success, 1 usage or config error, 2 runtime error,
/// 3 verification failure.
#[derive(Debug, Parser)]
#[command(name = "orat", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset or a label-corrupted copy of one.
    GenData(GenDataArgs),
    /// Train a model and write `model.ckpt` and `history.csv`.
    Train(TrainArgs),
    /// Evaluate a checkpoint under natural, FGSM and PGD attacks.
    Eval(EvalArgs),
    /// Grid search `(k, m)` on a held-out validation split.
    GridSearch(GridArgs),
    /// Run the numerical oracle suite.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Figure1Balanced,
    Figure1Imbalanced,
    Separable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoiseKind {
    None,
    Symmetric,
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttackChoice {
    None,
    Fgsm,
    Pgd,
    All,
}

/// Label noise applied after loading.
#[derive(Clone, Debug, Args)]
pub struct NoiseArgs {
    #[arg(long, value_enum, default_value_t = NoiseKind::None)]
    pub noise: NoiseKind,
    /// Corruption rate in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    /// Asymmetric flips as `from:to,...`, or `mnist`.
    #[arg(long, default_value = "mnist")]
    pub flip_map: String,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Synthetic 2-D preset.
    #[arg(long, value_enum, conflicts_with = "input", required_unless_present = "input")]
    pub preset: Option<Preset>,
    /// Existing dataset: a CSV file or a directory with IDX files.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path [default: `<preset>.csv`].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Training knobs shared by `train` and `grid-search`.
///
/// Precedence, lowest first: built-in defaults, `--config`, `--set`, the
/// dedicated flags.
#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// Key-value config file (`key = value` lines, `#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// orat, at or st.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Training attack: none, fgsm or pgd.
    #[arg(long)]
    pub attack: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub pgd_steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Comma separated hidden layer widths.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training data: a CSV file or a directory with IDX files.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test data: a CSV file or a directory with IDX files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = AttackChoice::All)]
    pub attack: AttackChoice,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 20)]
    pub pgd_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Label written in the `defense` column.
    #[arg(long, default_value = "model")]
    pub defense: String,
    /// Label written in the `noise_kind` column.
    #[arg(long, default_value = "none")]
    pub noise_kind: String,
    /// Label written in the `gamma` column.
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    /// Report CSV path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Comma separated `k` values (absolute counts on the training split).
    #[arg(long)]
    pub k_grid: String,
    /// Comma separated `m` values.
    #[arg(long)]
    pub m_grid: String,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value = "grid.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random loss vectors per identity.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Largest loss-vector length (capped at 12 for the saddle-point check).
    #[arg(long, default_value_t = 20)]
    pub nmax: usize,
    /// Random points for the dual subgradient audit.
    #[arg(long, default_value_t = 10_000)]
    pub points: usize,
    #[arg(long, default_value_t = 50)]
    pub mlp_trials: usize,
    #[arg(long, default_value_t = 10_001)]
    pub phi_points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
