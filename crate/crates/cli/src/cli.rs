use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "msnma", version, about = "Survival network meta-analysis with M-spline baseline hazards")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan and audit knots; write Kaplan-Meier coordinates.
    Knots(KnotsArgs),
    /// Sample the posterior of a model.
    Fit(FitArgs),
    /// Survival, hazard and log hazard ratio curves from a fit.
    Predict(PredictArgs),
    /// PSIS leave-one-out comparison of one or more fits.
    Loo(LooArgs),
    /// Prior predictive hazard ribbons for the baseline prior variants.
    PriorPredictive(PriorPredictiveArgs),
    /// Multivariate Normal summary of a fit for use in other models.
    ExportMvn(ExportArgs),
    /// Simulate survival data from configured hazards.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct KnotsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub iter_warmup: Option<usize>,
    #[arg(long)]
    pub iter_sampling: Option<usize>,
    /// Network reference treatment (overrides the config).
    #[arg(long)]
    pub reference: Option<String>,
    /// Replace a fit from a different configuration in `--out-dir`.
    #[arg(long)]
    pub force: bool,
}

/// Selects a population and the curves to evaluate.
#[derive(Debug, Args)]
pub struct CurveArgs {
    /// Directory to write to; also the fit directory unless `--fit` is given.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Checked against the data hash recorded with the fit.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Study whose population the curves describe.
    #[arg(long)]
    pub population: String,
    /// Comma-separated treatment labels; all treatments when omitted.
    #[arg(long, value_delimiter = ',')]
    pub treatments: Option<Vec<String>>,
    /// Largest time on the output grid; the last observed time when omitted.
    #[arg(long)]
    pub grid_max: Option<f64>,
    #[arg(long, default_value_t = msnma::products::DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    /// Covariate values as `name=value`, comma-separated; all columns required.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub curves: CurveArgs,
    /// Comparator for log hazard ratios; the network reference when omitted.
    #[arg(long)]
    pub reference: Option<String>,
}

#[derive(Debug, Args)]
pub struct LooArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Fit directories to compare; `--out-dir` when omitted.
    #[arg(long)]
    pub fit: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PriorPredictiveArgs {
    /// Used to plan knots when the config gives none.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub grid_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub curves: CurveArgs,
    /// Seed for the Normal-approximation check.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 4000)]
    pub n_resample: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}
