//! `galamm` command-line interface.
//!
//! Every command writes its tables and a `manifest.json` into `--out` and
//! nowhere else. Exit codes: 0 success, 1 input or runtime error, 2 fit did
//! not converge (results are still written).

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "galamm", version, about = "Generalized additive latent and mixed models")]
pub struct Cli {
    /// Worker threads for replicate loops; defaults to all cores.
    #[arg(long, global = true, env = "GALAMM_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a dataset.
    Fit(FitArgs),
    /// Pointwise and simultaneous bands for a smooth term of a fit.
    Bands(BandsArgs),
    /// Simulate a dataset or run a simulation study.
    Simulate(SimulateArgs),
    /// Parametric bootstrap of a fit.
    Bootstrap(BootstrapArgs),
    /// AIC and likelihood-ratio comparison of fits on the same data.
    Compare(CompareArgs),
}

/// Controls of the outer optimizer shared by fitting commands.
#[derive(Debug, Clone, Args)]
pub struct OptimizerArgs {
    /// Maximum outer iterations.
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    /// Projected-gradient tolerance relative to 1 + |loglik|.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    /// Standardize the responses of every all-Gaussian dispersion group.
    #[arg(long)]
    pub standardize: bool,
    /// Skip the Hessian; no standard errors are reported.
    #[arg(long)]
    pub no_hessian: bool,
}

#[derive(Debug, Args)]
pub struct BandsArgs {
    /// Directory written by `galamm fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub smooth: String,
    /// `from:to:n` for an even grid or a comma-separated list; defaults to
    /// 100 points over the observed covariate range.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100_000)]
    pub nsim: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Latent variable whose loading multiplies the smooth's rows (offsets mode).
    #[arg(long, requires = "offsets")]
    pub latent: Option<String>,
    /// Latent values in units of the latent's estimated standard deviation.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "latent")]
    pub offsets: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Design {
    CognitiveLike,
    SesLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Power,
    Boundary,
    Coverage,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in design to simulate from.
    #[arg(long, conflicts_with = "from_fit")]
    pub design: Option<Design>,
    /// TOML file overriding fields of the design.
    #[arg(long, requires = "design")]
    pub design_config: Option<PathBuf>,
    /// Number of subjects (overrides the design default).
    #[arg(long)]
    pub subjects: Option<usize>,
    /// True interaction loading of the ses-like design.
    #[arg(long, allow_hyphen_values = true)]
    pub lambda8: Option<f64>,
    /// Simulate from a fit directory instead of a design.
    #[arg(long)]
    pub from_fit: Option<PathBuf>,
    /// Redraw penalized smooth coefficients when simulating from a fit.
    #[arg(long, requires = "from_fit")]
    pub redraw_smooths: bool,
    /// Run a simulation study instead of writing one dataset.
    #[arg(long, requires = "design")]
    pub study: Option<Study>,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    /// True interaction loadings for the power study.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub lambda8_grid: Option<Vec<f64>>,
    /// Timepoint shares of the total variance for the boundary study.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Latent offsets, in true standard deviations, for the coverage study.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub offsets: Option<Vec<f64>>,
    #[arg(long, default_value_t = 50)]
    pub grid_points: usize,
    #[arg(long, default_value_t = 10_000)]
    pub nsim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    /// Skip per-replicate Hessians; asymptotic standard errors are not averaged.
    #[arg(long)]
    pub no_hessian: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Fit directories, in table order.
    #[arg(required = true, num_args = 2..)]
    pub fits: Vec<PathBuf>,
    /// Row labels; defaults to the directory names.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let code = commands::dispatch(&cli.command);
    ExitCode::from(code as u8)
}
