mod commands;
mod source;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use tokenmix_core::invariance::TransformKind;
use tokenmix_core::selftest::Group;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] tokenmix_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use tokenmix_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::CheckFailed(_) => 1,
            CliError::Core(E::Config(_) | E::InvalidArgument(_) | E::Image(_) | E::Io(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "tokenmix", version, about = "Spatial token mixer workbench")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print name, mixer, variant, shape trace, parameters and FLOPs (MACs).
    Describe(DescribeArgs),
    /// Initialize a model and write its checkpoint.
    Build(BuildArgs),
    /// Verify a checkpoint against a config and run the probe forward pass.
    Load(LoadArgs),
    /// Effective receptive field maps and ERF@50 per stage.
    Erf(ErfArgs),
    /// Prediction consistency under translation, rotation and scaling.
    Invariance(InvarianceArgs),
    /// Run the oracle battery.
    Selftest(SelftestArgs),
}

/// Where the model comes from.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// TOML model recipe.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in preset, `<scale>-<mixer>` (e.g. `micro-halo`, `tiny-halo-switch`).
    #[arg(long)]
    pub preset: Option<String>,
    /// Weights checkpoint; random initialization when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Describe all 20 standard presets.
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    pub all: bool,
    /// CSV output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LoadArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct ErfArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory of PGM/PPM/RF32 images.
    #[arg(long, conflicts_with = "noise")]
    pub images: Option<PathBuf>,
    /// Use this many seeded uniform-noise images instead of an image directory.
    #[arg(long)]
    pub noise: Option<usize>,
    /// Comma-separated stage indices (0-based); defaults to the last two.
    #[arg(long, value_delimiter = ',')]
    pub stages: Vec<usize>,
    /// Output directory for `erf.csv` and the per-stage maps.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Log-scale the PGM maps.
    #[arg(long)]
    pub log_scale: bool,
}

#[derive(Debug, Args)]
pub struct InvarianceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, conflicts_with = "noise")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub noise: Option<usize>,
    /// Integer labels, one per line in image order; enables the accuracy column.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Transform to sweep; all three when absent.
    #[arg(long)]
    pub transform: Option<TransformKind>,
    /// CSV output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict the run to these check groups (comma-separated).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub group: Vec<CheckGroup>,
    /// Perturb the fixture of the named check.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CheckGroup {
    Primitives,
    MixerOracles,
    Architecture,
    Gradients,
    Equivariance,
    Accounting,
}

impl From<CheckGroup> for Group {
    fn from(g: CheckGroup) -> Self {
        match g {
            CheckGroup::Primitives => Group::Primitives,
            CheckGroup::MixerOracles => Group::MixerOracles,
            CheckGroup::Architecture => Group::Architecture,
            CheckGroup::Gradients => Group::Gradients,
            CheckGroup::Equivariance => Group::Equivariance,
            CheckGroup::Accounting => Group::Accounting,
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Describe(a) => commands::describe(&a),
        Command::Build(a) => commands::build(&a),
        Command::Load(a) => commands::load(&a),
        Command::Erf(a) => commands::erf(&a),
        Command::Invariance(a) => commands::invariance(&a),
        Command::Selftest(a) => commands::selftest(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
