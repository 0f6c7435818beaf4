//! Command-line driver for o2olab experiments.
//!
//! Every command validates its configuration before touching the disk,
//! writes into a hidden staging directory and renames it into place only
//! after all artifacts and the manifest are written.

mod commands;
mod output;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use output::{Manifest, FileHash};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "O2OLAB_OUT";
pub const DEFAULT_OUT_ROOT: &str = "o2olab-runs";

/// Reference regret means per (env, offline, online) cell.
pub const REFERENCE_REGRET_CELLS: &str = include_str!("../fixtures/reference_regret.csv");

#[derive(Parser, Debug)]
#[command(name = "o2olab", version, about = "Offline-to-online actor-critic experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON experiment config; unspecified fields take their defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dotted-path config override; repeatable, the last one wins.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; must not exist yet.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Restricts the run to this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for seeds, grid cells and interpolation points.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the noisy scripted-expert dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the outcome-conditioned diffusion score model.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        /// Dataset file from gen-data; regenerated from the config when absent.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Offline pre-training, one run per seed.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Score model file for SMAC; trained here when absent.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Online fine-tuning of pre-trained checkpoints.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// A checkpoint file or a pretrain output directory.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Returns along the line between an offline and an online actor.
    LandscapeLine {
        #[command(flatten)]
        common: Common,
        /// Offline checkpoint, then online checkpoint.
        #[arg(long, value_name = "PATH", num_args = 1)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 21)]
        points: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        t_min: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        t_max: f64,
    },
    /// Returns on the plane through three actors.
    LandscapePlane {
        #[command(flatten)]
        common: Common,
        /// Three checkpoints θ₁, θ₂, θ₃.
        #[arg(long, value_name = "PATH", num_args = 1)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = o2olab::analysis::DEFAULT_GRID_RESOLUTION)]
        resolution: usize,
        #[arg(long, default_value_t = o2olab::analysis::DEFAULT_GRID_RANGE.0, allow_negative_numbers = true)]
        range_min: f64,
        #[arg(long, default_value_t = o2olab::analysis::DEFAULT_GRID_RANGE.1, allow_negative_numbers = true)]
        range_max: f64,
    },
    /// Min-max normalized regret table from regret cells or fine-tuning runs.
    RegretTable {
        #[command(flatten)]
        common: Common,
        /// Cells CSV, or a directory of cell CSVs and run_summary.json files;
        /// the bundled reference cells when absent.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Checks the max-entropy identity on a quadratic Q by quadrature.
    VerifyIdentity {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Flattened actor parameters of checkpoints, one row each.
    ExportCheckpoints {
        #[command(flatten)]
        common: Common,
        /// Checkpoint files or directories searched for *.ckpt.
        #[arg(long, value_name = "PATH", num_args = 1)]
        input: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainDiffusion { .. } => "train-diffusion",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::LandscapeLine { .. } => "landscape-line",
            Command::LandscapePlane { .. } => "landscape-plane",
            Command::RegretTable { .. } => "regret-table",
            Command::VerifyIdentity { .. } => "verify-identity",
            Command::ExportCheckpoints { .. } => "export-checkpoints",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::TrainDiffusion { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::LandscapeLine { common, .. }
            | Command::LandscapePlane { common, .. }
            | Command::RegretTable { common, .. }
            | Command::VerifyIdentity { common, .. }
            | Command::ExportCheckpoints { common, .. } => common,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or arguments detected after parsing.
    Usage(String),
    Lib(o2olab::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<o2olab::Error> for CliError {
    fn from(e: o2olab::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_CONFIG,
            CliError::Lib(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Lib(o2olab::Error::Config(_)) => EXIT_CONFIG,
            CliError::Lib(_) => EXIT_FAILURE,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(&cli.command) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
