//! `exdf`: fit, predict, validate and inspect threshold-exceedance fusion models.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// A problem with the user's invocation, configuration or inputs (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Debug, Parser)]
#[command(name = "exdf", version, about = "Bayesian fusion of station and gridded threshold exceedances")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and write a posterior archive.
    Fit(FitArgs),
    /// Predictive exceedances at a location, or a surface over all cells.
    Predict(PredictArgs),
    /// Leave-one-site-out cross-validation.
    Validate(ValidateArgs),
    /// Generate a synthetic data set with known parameters.
    Simulate(SimulateArgs),
    /// Convergence diagnostics and trace tables; optionally the decay pre-fit.
    Diagnose(DiagnoseArgs),
    /// Mean residual life tables for threshold selection.
    Threshold(ThresholdArgs),
    /// Flatten a posterior archive.
    Export(ExportArgs),
    /// Quantile-quantile table of a fitted station's exceedances.
    Qq(QqArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Run configuration (TOML).
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-execute the fit recorded in this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Archive path [default: <output_dir>/posterior.bin].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatArg {
    /// Mean of the positive predictive exceedances.
    Shortfall,
    /// Spread (max - min) of the positive predictive exceedances.
    Range,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Posterior archive [default: <output_dir>/posterior.bin].
    #[arg(long)]
    pub posterior: Option<PathBuf>,
    /// Target location as `X,Y` in the input files' coordinate system.
    #[arg(long, value_name = "X,Y", required_unless_present = "surface", conflicts_with = "surface")]
    pub at: Option<String>,
    /// Summarise the predictive at every grid cell instead.
    #[arg(long)]
    pub surface: bool,
    /// Surface statistic.
    #[arg(long, value_enum, default_value = "shortfall")]
    pub stat: StatArg,
    /// First day to predict (YYYY-MM-DD).
    #[arg(long)]
    pub start: Option<String>,
    /// Last day to predict (YYYY-MM-DD).
    #[arg(long)]
    pub end: Option<String>,
    /// Station threshold for Gaussian-baseline predictions at a point
    /// [default: inverse-distance average of the fitted sites' thresholds].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output CSV [default: <output_dir>/prediction.csv or surface_<stat>.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Leave-one-site-out cross-validation.
    #[arg(long)]
    pub loso: bool,
    /// Metrics CSV [default: <output_dir>/metrics.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Exceedance,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Full scenario (TOML); overrides the shortcut flags.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "exceedance")]
    pub kind: KindArg,
    #[arg(long, default_value_t = 6)]
    pub n_sites: usize,
    #[arg(long, default_value_t = 365)]
    pub n_days: usize,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Directory for stations.csv, grid.csv, truth.json and the manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Posterior archive.
    #[arg(required_unless_present = "variogram")]
    pub archive: Option<PathBuf>,
    /// Run the decay-rate variogram pre-fit on the configured data.
    #[arg(long, requires = "config")]
    pub variogram: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for R-hat, acceptance, trace and variogram tables
    /// [default: <archive stem>_diagnostics or <output_dir>].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Restrict to one station.
    #[arg(long)]
    pub site: Option<String>,
    /// Number of candidate thresholds.
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    /// Output CSV [default: <output_dir>/mrl.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub archive: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    /// Output file [default: archive path with .csv extension].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QqArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub site: String,
    #[arg(long)]
    pub posterior: Option<PathBuf>,
    /// Output CSV [default: <output_dir>/qq_<site>.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<exdf_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("EXDF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Invalid(format!("EXDF_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow::anyhow!("cannot configure {n} worker threads: {e}"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Validate(a) => commands::validate(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Threshold(a) => commands::threshold(&a),
        Command::Export(a) => commands::export(&a),
        Command::Qq(a) => commands::qq(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
