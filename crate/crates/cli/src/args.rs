use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mechtest", version, about = "Bounds and tests for the sharp null of full mediation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lower bounds on direct-effect shares, the sharp-null slack and per-cell plot data.
    Bounds(BoundsArgs),
    /// Finite-sample test of the sharp null.
    Test(TestArgs),
    /// Pooled bound over a grid of defier budgets and the breakdown budget.
    Robustness(RobustnessArgs),
    /// Trimming bounds on the average direct effect for always-takers.
    Ade(AdeArgs),
    /// Monte Carlo rejection rates under a mixture design.
    Simulate(SimulateArgs),
    /// Cell counts and identified-set feasibility.
    Diagnose(DiagnoseArgs),
}

/// Where results go. Every run also writes a manifest.
#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Primary output file; JSON outputs default to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Manifest path [default: <out>.manifest.json, or mechtest-manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Key = value file supplying defaults for any long flag; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "y")]
    pub y_col: String,
    #[arg(long, default_value = "d")]
    pub d_col: String,
    /// Mediator columns in order [default: m, or m1, m2, …].
    #[arg(long, value_delimiter = ',')]
    pub m_cols: Vec<String>,
    #[arg(long)]
    pub cluster_col: Option<String>,
    #[arg(long)]
    pub z_col: Option<String>,
    #[arg(long)]
    pub pscore_col: Option<String>,
    /// randomized, iv, ipw or me (measurement error).
    #[arg(long, default_value = "randomized")]
    pub strategy: String,
    /// Propensity overlap bound for ipw.
    #[arg(long, default_value_t = mechtest_core::ident::DEFAULT_OVERLAP)]
    pub overlap: f64,
    /// Misclassification matrix for me, rows separated by `;`:
    /// entry (i, j) is P(observed m_i | true m_j).
    #[arg(long)]
    pub me_matrix: Option<String>,
    /// monotone, defier_budget:<d>, elementwise, elementwise_budget:<d>,
    /// bounded:<kappa>,<d>, none, or custom:<file> (rows of B followed by c).
    #[arg(long, default_value = "monotone")]
    pub restriction: String,
    /// Substitute the smallest defier budget when the monotone identified set is empty.
    #[arg(long)]
    pub auto_relax: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Outcome grid: raw, a quantile bin count, or cut:a,b,…
    #[arg(long, default_value = "raw")]
    pub bins: String,
    /// Skip the direct-effect trimming bounds.
    #[arg(long)]
    pub no_ade: bool,
    /// Check whether within-bin effect shares up to this value explain the data.
    #[arg(long)]
    pub nu_max: Option<f64>,
    /// Also compute the breakdown defier budget.
    #[arg(long)]
    pub breakdown: bool,
    /// Per-cell probability differences for bar charts [default: <out>.plot.csv].
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "5")]
    pub bins: String,
    /// lf-boot or cond-chisq.
    #[arg(long, default_value = "lf-boot")]
    pub method: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = mechtest_core::inference::DEFAULT_DRAWS)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-value upper bounds on direct-effect shares (comma separated);
    /// omitted means the sharp null.
    #[arg(long, value_delimiter = ',')]
    pub nu_ub: Vec<f64>,
    #[arg(long, default_value_t = mechtest_core::inference::DEFAULT_CELL_FLOOR)]
    pub cell_floor: f64,
    /// Bootstrap draws for the covariance of non-randomized estimators.
    #[arg(long, default_value_t = 500)]
    pub cov_draws: usize,
    /// Also report the verdict over a grid of levels.
    #[arg(long)]
    pub p_curve: bool,
    /// Use the general moment system even for binary mediators.
    #[arg(long)]
    pub force_general: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "raw")]
    pub bins: String,
    /// Defier budgets to evaluate (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
    /// Spacing of the default grid on [0, 1].
    #[arg(long, default_value_t = 0.05)]
    pub grid_step: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AdeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "raw")]
    pub bins: String,
    /// Only this mediator index.
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "5")]
    pub bins: String,
    #[arg(long, default_value_t = mechtest_core::inference::DEFAULT_CELL_FLOOR)]
    pub cell_floor: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Pool CSV split by treatment; overrides --design.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Synthetic pools: binary, continuous, clustered, ordered or power
    /// [default: clustered with --clusters, else continuous].
    #[arg(long)]
    pub design: Option<String>,
    #[arg(long, default_value_t = 5000)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 1)]
    pub pool_seed: u64,
    /// Mixture weight on the treated pool.
    #[arg(long)]
    pub t: f64,
    #[arg(long, default_value_t = 500)]
    pub nsims: usize,
    /// Units per arm.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Clusters drawn per arm (cluster sampling).
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long, default_value = "lf-boot")]
    pub method: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = mechtest_core::inference::DEFAULT_DRAWS)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "5")]
    pub bins: String,
    #[arg(long, default_value = "monotone")]
    pub restriction: String,
    #[arg(long)]
    pub auto_relax: bool,
    /// Per-simulation CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON [default: stdout].
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}
