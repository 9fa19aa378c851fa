//! Command-line front end for the `autm` library.
//!
//! Every subcommand reads an optional TOML run file (`--config`), applies
//! its own flags on top, writes its artifacts plus a `manifest.json` under
//! the output directory and maps failures onto the exit codes listed in
//! [`EXIT_CODES`].

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use autm::universality::KernelKind;
use autm::Family;

pub mod commands;
pub mod config;

use config::DataSource;

pub const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, malformed value)
  3  invalid configuration (aggregated diagnostics are printed)
  4  I/O or data error (unreadable file, bad CSV, bad checkpoint)
  5  numerical failure (diverging trajectories, training stopped on an error)
  6  a check ran but missed its threshold (gradcheck, roundtrip)";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Numerical(_) => 5,
            CliError::Check(_) => 6,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "autm", version, about = "Train, sample and check AUTM monotone flows", after_help = EXIT_CODES)]
pub struct Cli {
    /// TOML run file; flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory for all artifacts [default: autm-out].
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for data, initialization, batching and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a flow by maximum likelihood; writes init.json, model.json and history.csv.
    #[command(after_help = EXIT_CODES)]
    Train(TrainArgs),
    /// Evaluate the log-density of a 2-D model on a grid; writes density_grid.csv.
    #[command(after_help = EXIT_CODES)]
    DensityGrid(GridArgs),
    /// Draw samples from a saved model; writes samples.csv.
    #[command(after_help = EXIT_CODES)]
    Sample(SampleArgs),
    /// Fixed-point vs bisection refinement step counts; writes bench.csv.
    #[command(after_help = EXIT_CODES)]
    InvertBench(BenchArgs),
    /// Convergence of the q_s approximants to a target; writes universality.csv.
    #[command(after_help = EXIT_CODES)]
    Universality(UniversalityArgs),
    /// Finite-difference checks of every gradient; writes gradcheck.csv.
    #[command(after_help = EXIT_CODES)]
    Gradcheck(GradcheckArgs),
    /// Forward then inverse on base draws; writes roundtrip.csv.
    #[command(after_help = EXIT_CODES)]
    Roundtrip(RoundtripArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of AUTM layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Conditioner hidden widths, e.g. `32,32`.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// quadratic, cubic or sigmoid_affine.
    #[arg(long)]
    pub family: Option<Family>,
    /// coupling or autoregressive.
    #[arg(long)]
    pub architecture: Option<String>,
    /// tanh or relu.
    #[arg(long)]
    pub activation: Option<String>,
    /// RK4 steps per map evaluation.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// `toy:<two_moons|rings|checkerboard|two_gaussians>` or `csv:<path>`.
    #[arg(long)]
    pub dataset: Option<DataSource>,
    /// Rows drawn for a toy dataset.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// 0 disables gradient clipping.
    #[arg(long, allow_negative_numbers = true)]
    pub clip_norm: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub lo: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub hi: Option<f64>,
    /// Points per axis.
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Quadratic integrand coefficients `a,b,c`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub params: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub tolerances: Option<Vec<f64>>,
    #[arg(long)]
    pub n_inputs: Option<usize>,
    /// RK4 steps of the benchmark map.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct UniversalityArgs {
    /// affine, softplus_shift or arctan_blend.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Decreasing scales, e.g. `0.5,0.333,0.25,0.2`.
    #[arg(long = "s", value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    /// constant or gaussian.
    #[arg(long)]
    pub kernel: Option<KernelKind>,
    /// Evaluation points on the interval.
    #[arg(long)]
    pub grid: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Largest acceptable relative error.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RoundtripArgs {
    /// Checkpoint to test; a fresh model from the model flags otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Parameter noise for a freshly built model.
    #[arg(long)]
    pub perturb: Option<f64>,
    #[command(flatten)]
    pub spec: ModelArgs,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
