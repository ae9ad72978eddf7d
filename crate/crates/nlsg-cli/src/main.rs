//! Experiment runner for noisy-label segmentation.
//!
//! Subcommands cover the full pipeline: `simulate` writes a corrupted
//! multi-annotator dataset, `fuse` runs a classical baseline over it,
//! `train` fits a model variant, `evaluate` scores a checkpoint,
//! `verify-theorem` exercises the exhaustive trace-recovery check, and
//! `report` runs every configured method over every seed and emits CSV
//! tables plus SVG charts. Exit codes: 0 success, 1 configuration error,
//! 2 runtime error.

mod charts;
mod config;
mod fsio;
mod runner;
mod theorem;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::Method;

#[derive(Debug)]
pub enum CliError {
    /// The request itself is wrong: unparseable flags, bad config files,
    /// inconsistent settings. Exit code 1.
    Config(String),
    /// The request was valid but execution failed. Exit code 2.
    Runtime(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl From<nlsg_core::Error> for CliError {
    fn from(e: nlsg_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "nlsg", version, about = "Noisy-label segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a noisy multi-annotator dataset and write it to disk.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to <output_dir>/data.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one fusion baseline and write the fused label maps.
    Fuse {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Method,
        /// Dataset directory from `simulate`; omitted means simulate in
        /// memory from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output tensor path; defaults to <output_dir>/fused-<method>.nlsg.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model variant and write checkpoint plus history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Ours)]
        method: Method,
        /// Dataset directory from `simulate`; omitted means simulate in
        /// memory from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to <output_dir>/train-<method>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also save an intermediate checkpoint every N epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Training seed; defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a saved checkpoint on a dataset directory.
    Evaluate {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; a `test/` subdirectory is used when present.
        #[arg(long)]
        data: PathBuf,
        /// Also write the full metrics report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Check trace recovery exhaustively on random dominant instances.
    VerifyTheorem {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Instance r uses 1 + (r mod this) annotators.
        #[arg(long, default_value_t = 3)]
        max_annotators: usize,
        /// Simplex grid resolution of the search.
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write per-instance outcomes as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run every configured method over every seed; emit CSV and charts.
    Report {
        #[arg(long)]
        config: PathBuf,
        /// Corruption scale levels; when given the whole run repeats per
        /// level and a noise-sweep table and chart are emitted.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        sweep_levels: Option<Vec<usize>>,
    },
}

fn worker_cap_from_env() -> CliResult<()> {
    match std::env::var("NLSG_WORKERS") {
        Ok(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => {
                nlsg_core::par::configure_workers(n);
                Ok(())
            }
            _ => Err(CliError::Config(format!(
                "NLSG_WORKERS must be a positive integer, got {raw:?}"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(CliError::Config(format!("NLSG_WORKERS: {e}"))),
    }
}

fn run() -> CliResult<()> {
    worker_cap_from_env()?;
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    match cli.command {
        Command::Simulate { config, out } => runner::simulate_cmd(&config, out.as_deref()),
        Command::Fuse {
            config,
            method,
            data,
            out,
        } => runner::fuse_cmd(&config, method, data.as_deref(), out.as_deref()),
        Command::Train {
            config,
            method,
            data,
            out,
            checkpoint_every,
            seed,
        } => runner::train_cmd(
            &config,
            method,
            data.as_deref(),
            out.as_deref(),
            checkpoint_every,
            seed,
        ),
        Command::Evaluate {
            checkpoint,
            data,
            json,
        } => runner::evaluate_cmd(&checkpoint, &data, json.as_deref()),
        Command::VerifyTheorem {
            instances,
            classes,
            max_annotators,
            grid,
            seed,
            json,
        } => theorem::verify_cmd(instances, classes, max_annotators, grid, seed, json.as_deref()),
        Command::Report {
            config,
            sweep_levels,
        } => runner::report_cmd(&config, sweep_levels.as_deref()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Config(_) => ExitCode::from(1),
                CliError::Runtime(_) => ExitCode::from(2),
            }
        }
    }
}
