//! `sceneloc` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 bad input data,
//! 3 numerical failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<sceneloc::Error> for CliError {
    fn from(e: sceneloc::Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Parser)]
#[command(name = "sceneloc", version, about = "Scene-landmark camera localization pipeline")]
pub struct Cli {
    /// TOML file overriding the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic room with ground truth.
    Synth(SynthArgs),
    /// Pick salient, well separated landmarks from a reconstruction.
    Select(SelectArgs),
    /// Split a landmark set into equal-size groups.
    Partition(PartitionArgs),
    /// Label landmark visibility per image against a mesh.
    Visibility(VisibilityArgs),
    /// Simulate noisy detections with outliers.
    Simulate(SimulateArgs),
    /// Estimate camera poses from detections.
    Localize(LocalizeArgs),
    /// Score pose files against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub sites: Option<usize>,
    #[arg(long)]
    pub occluders: Option<usize>,
    #[arg(long)]
    pub cameras: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Reconstruction directory (cameras.txt, images.txt, points3D.txt), or a
    /// directory holding it as `sparse/`.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Initial separation radius in meters.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub min_track: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub landmarks: PathBuf,
    /// default, random, kmeans or fps.
    #[arg(long)]
    pub criterion: Option<String>,
    #[arg(long)]
    pub groups: Option<usize>,
    /// Required by the random and kmeans criteria.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VisibilityArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Triangle mesh (.ply or .obj).
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub depth_abs: Option<f64>,
    #[arg(long)]
    pub depth_rel: Option<f64>,
    #[arg(long)]
    pub normal_deg: Option<f64>,
    #[arg(long)]
    pub max_surface_distance: Option<f64>,
    #[arg(long)]
    pub decimation: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long)]
    pub visibility: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Detection CSV. With `--partitions`, one file per group is written as
    /// `<stem>_part<g>.<ext>` instead.
    #[arg(long)]
    pub out: PathBuf,
    /// Noise standard deviation in pixels.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub outlier_rate: Option<f64>,
    #[arg(long)]
    pub partitions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub landmarks: PathBuf,
    /// Detection CSV; repeat to merge an ensemble of partition detectors.
    #[arg(long, required = true)]
    pub detections: Vec<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub weight_exp: Option<f64>,
    /// Inlier threshold in pixels.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub confidence: Option<f64>,
    #[arg(long)]
    pub min_inliers: Option<usize>,
    /// none, unweighted or weighted.
    #[arg(long)]
    pub refinement: Option<String>,
    /// progressive or uniform.
    #[arg(long)]
    pub sampling: Option<String>,
    /// Run label used in evaluation reports.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ground-truth reconstruction.
    #[arg(long)]
    pub scene: PathBuf,
    /// Pose file; repeat to compare configurations.
    #[arg(long, required = true)]
    pub poses: Vec<PathBuf>,
    /// Needed with `--detections` for detection errors.
    #[arg(long, requires = "detections")]
    pub landmarks: Option<PathBuf>,
    #[arg(long, requires = "landmarks")]
    pub detections: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-image CSV.
    #[arg(long)]
    pub per_image: Option<PathBuf>,
    #[arg(long)]
    pub r_thresh: Option<f64>,
    #[arg(long)]
    pub t_thresh: Option<f64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(&cfg, a),
        Command::Select(a) => commands::select(&cfg, a),
        Command::Partition(a) => commands::partition(&cfg, a),
        Command::Visibility(a) => commands::visibility(&cfg, a),
        Command::Simulate(a) => commands::simulate(&cfg, a),
        Command::Localize(a) => commands::localize(&cfg, a),
        Command::Evaluate(a) => commands::evaluate(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
