//! Command-line argument definitions.
//!
//! Every option that can also come from a `--config` JSON file is declared
//! as an `Option` with no clap default, so the resolver can tell "explicitly
//! given on the command line" (which overrides the file) from "absent" (file
//! value, then the built-in default, applies).

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "scdid",
    version,
    about = "Doubly robust difference-in-differences / synthetic-control ATT estimation",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Point estimate of the ATT on a CSV dataset
    Estimate(EstimateArgs),
    /// Point estimate plus a multiplier-bootstrap confidence interval
    Bootstrap(BootstrapArgs),
    /// Share-weighted average of cohort effects at a common event time
    EventStudy(EventStudyArgs),
    /// Monte Carlo study of the estimator on a built-in process
    Simulate(SimulateArgs),
    /// Validate a dataset and report identifiability diagnostics
    Validate(ValidateArgs),
}

/// Options shared by every dataset-driven subcommand.
#[derive(Args, Default, Clone)]
pub struct CommonArgs {
    /// Long-format CSV dataset
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Sampling design of the data [default: panel]
    #[arg(long, value_enum)]
    pub design: Option<DesignArg>,

    /// Label of the treated group (panel and rc designs)
    #[arg(long)]
    pub treated_group: Option<String>,

    /// Unit-identifier column [default: unit_id]
    #[arg(long)]
    pub unit_col: Option<String>,

    /// Group column [default: group]
    #[arg(long)]
    pub group_col: Option<String>,

    /// Time column [default: time]
    #[arg(long)]
    pub time_col: Option<String>,

    /// Outcome column [default: y]
    #[arg(long)]
    pub y_col: Option<String>,

    /// Comma-separated continuous covariate columns
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,

    /// Comma-separated discrete covariate columns
    #[arg(long, value_delimiter = ',')]
    pub discrete: Option<Vec<String>>,

    /// Cross-fitting folds, at least 2 [default: 2]
    #[arg(long)]
    pub folds: Option<usize>,

    /// Master RNG seed controlling every random element [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,

    /// Kernel family [default: gaussian]
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,

    /// Local-polynomial order, at most 3 [default: 1]
    #[arg(long)]
    pub order: Option<usize>,

    /// Bandwidth: a number, or `auto` for the plug-in rule [default: auto]
    #[arg(long)]
    pub bandwidth: Option<BandwidthArg>,

    /// Relative ridge rescuing singular local fits [default: 1e-10]
    #[arg(long)]
    pub ridge_eps: Option<f64>,

    /// Upper clamp for estimated propensity ratios [default: 50]
    #[arg(long)]
    pub r_max: Option<f64>,

    /// Control weights: `solved`, `uniform`, or comma-separated values
    #[arg(long)]
    pub weights: Option<WeightsArg>,

    /// Project solved weights onto the probability simplex
    #[arg(long)]
    pub nonneg: bool,

    /// Relative eigenvalue floor for weight solves [default: 1e-8]
    #[arg(long)]
    pub min_eig_floor: Option<f64>,

    /// Ridge penalty for weight solves (off unless set)
    #[arg(long)]
    pub ridge: Option<f64>,

    /// Drop observations whose weight solve fails instead of erroring
    #[arg(long)]
    pub allow_partial: bool,

    /// Cap for worker threads [default: all cores]
    #[arg(long)]
    pub threads: Option<usize>,

    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Also write the JSON report to this path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Options describing a staggered adoption design.
#[derive(Args, Default, Clone)]
pub struct StaggeredArgs {
    /// Adoption periods as JSON, e.g. '{"A":3,"B":null}' (null = never)
    #[arg(long)]
    pub adoption: Option<String>,

    /// Cohort (group label) whose effect to estimate
    #[arg(long)]
    pub cohort: Option<String>,

    /// Event time e, periods since adoption [default: 0]
    #[arg(long)]
    pub event_time: Option<usize>,

    /// Donor-pool horizon ē [default: largest feasible]
    #[arg(long)]
    pub e_bar: Option<usize>,
}

#[derive(Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub staggered: StaggeredArgs,
    /// Run the pipeline separately per level of this discrete column
    #[arg(long)]
    pub by_discrete: Option<String>,
}

#[derive(Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub staggered: StaggeredArgs,
    /// Run the pipeline separately per level of this discrete column
    #[arg(long)]
    pub by_discrete: Option<String>,
    /// Bootstrap replications [default: 500]
    #[arg(long)]
    pub reps: Option<usize>,
    /// Confidence level complement, in (0,1) [default: 0.05]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Multiplier distribution [default: exponential]
    #[arg(long, value_enum)]
    pub weight_dist: Option<WeightDistArg>,
    /// Skip the synthetic-control influence adjustments in the report
    #[arg(long)]
    pub pt_only: bool,
}

#[derive(Args)]
pub struct EventStudyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub staggered: StaggeredArgs,
}

#[derive(Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub staggered: StaggeredArgs,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Data-generating process: 1 (structure only), 2 (trends only), 3 (both)
    #[arg(long)]
    pub dgp: u8,

    /// Units per replication [default: 1000]
    #[arg(long)]
    pub n: Option<usize>,

    /// Monte Carlo replications [default: 100]
    #[arg(long)]
    pub reps: Option<usize>,

    /// Bootstrap replications per Monte Carlo draw; 0 skips [default: 0]
    #[arg(long)]
    pub boot: Option<usize>,

    /// Confidence level complement, in (0,1) [default: 0.05]
    #[arg(long)]
    pub alpha: Option<f64>,

    /// Master RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,

    /// JSON calibration file overriding the built-in synthetic constants
    #[arg(long)]
    pub calibration: Option<PathBuf>,

    /// Number of periods [default: 6]
    #[arg(long)]
    pub periods: Option<usize>,

    /// Number of control groups [default: 6]
    #[arg(long)]
    pub control_groups: Option<usize>,

    /// Scale applied to the treatment effect [default: 1]
    #[arg(long)]
    pub effect_scale: Option<f64>,

    /// Scale applied to every noise SD [default: 1]
    #[arg(long)]
    pub noise_scale: Option<f64>,

    /// Multiplier distribution for the bootstrap [default: exponential]
    #[arg(long, value_enum)]
    pub weight_dist: Option<WeightDistArg>,

    /// Cap for worker threads [default: all cores]
    #[arg(long)]
    pub threads: Option<usize>,

    /// Also write the JSON report to this path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DesignArg {
    Panel,
    Rc,
    Staggered,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelArg {
    Gaussian,
    Epanechnikov,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightDistArg {
    /// Exponential(1): mean-1, variance-1
    Exponential,
    /// Mammen's two-point distribution
    Mammen,
    /// 1 + standard normal
    Normal,
    /// Constant 1 (degenerate; reproduces the point estimate)
    Unit,
}

/// `--bandwidth` accepts a number or the word `auto`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BandwidthArg {
    Auto,
    Fixed(f64),
}

impl FromStr for BandwidthArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        s.parse::<f64>()
            .map(Self::Fixed)
            .map_err(|_| format!("expected a number or `auto`, got '{s}'"))
    }
}

/// `--weights` accepts `solved`, `uniform`, or a comma-separated vector.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightsArg {
    Solved,
    Uniform,
    User(Vec<f64>),
}

impl FromStr for WeightsArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "solved" => return Ok(Self::Solved),
            "uniform" => return Ok(Self::Uniform),
            _ => {}
        }
        let parsed: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
        parsed.map(Self::User).map_err(|_| {
            format!("expected `solved`, `uniform`, or comma-separated numbers, got '{s}'")
        })
    }
}
