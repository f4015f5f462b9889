use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ehr_core::Estimator;

#[derive(Debug, Parser)]
#[command(name = "ehr", version, about = "Enveloped Huber regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one estimator and report estimates, standard errors and diagnostics.
    Fit(FitArgs),
    /// Cross-validate the envelope dimension.
    Cv(CvArgs),
    /// Pairs-bootstrap standard deviations and SD ratios between estimators.
    Bootstrap(BootstrapArgs),
    /// Run a Monte Carlo scenario.
    Simulate(SimulateArgs),
    /// Population Huber efficiency factors for the six error laws.
    HuberFactor(HuberFactorArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fit(_) => "fit",
            Self::Cv(_) => "cv",
            Self::Bootstrap(_) => "bootstrap",
            Self::Simulate(_) => "simulate",
            Self::HuberFactor(_) => "huber-factor",
        }
    }

    pub fn output(&self) -> &Output {
        match self {
            Self::Fit(a) => &a.output,
            Self::Cv(a) => &a.output,
            Self::Bootstrap(a) => &a.output,
            Self::Simulate(a) => &a.output,
            Self::HuberFactor(a) => &a.output,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// CSV file with a header row, or `statex77` for the bundled data.
    #[arg(long)]
    pub data: String,
    /// Response column: a header name or a 1-based column number.
    #[arg(long)]
    pub response: String,
    /// Divide each predictor by its sample standard deviation first.
    #[arg(long)]
    pub standardize: bool,
}

/// Where results go and how many worker threads compute them; neither
/// changes the numbers, so both stay out of the configuration hash.
#[derive(Debug, Clone, Args)]
pub struct Output {
    /// Output file (for `simulate`, a prefix for `.csv` and `.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; the default uses all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CvSettings {
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub cv_folds: usize,
    /// Largest envelope dimension searched (default min(p, 6)).
    #[arg(long)]
    pub max_u: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "ehr")]
    pub estimator: Estimator,
    /// Envelope dimension; chosen by cross-validation when omitted.
    #[arg(long)]
    pub u: Option<usize>,
    #[command(flatten)]
    pub cv: CvSettings,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "ehr")]
    pub estimator: Estimator,
    #[command(flatten)]
    pub cv: CvSettings,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Reference estimator; ratios are SD(other) / SD(reference).
    #[arg(long, default_value = "ehr")]
    pub estimator: Estimator,
    /// Estimators compared with the reference.
    #[arg(long, value_delimiter = ',', default_value = "hr,env,ls")]
    pub compare: Vec<Estimator>,
    /// Number of resamples.
    #[arg(long, default_value_t = 200)]
    pub bootstrap: usize,
    /// Envelope dimension for every envelope estimator; chosen per
    /// estimator by cross-validation when omitted.
    #[arg(long)]
    pub u: Option<usize>,
    #[command(flatten)]
    pub cv: CvSettings,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario file, or `homoscedastic-normal` for the bundled design.
    #[arg(long)]
    pub scenario: String,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the replicate count.
    #[arg(long)]
    pub reps: Option<usize>,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HuberFactorArgs {
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}
