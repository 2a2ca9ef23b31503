//! `diffcal`: file-mediated calibration pipeline.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 bad or missing
//! data, 4 numerical failure.

mod commands;
mod config;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Invalid flags, config or settings.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser)]
#[command(name = "diffcal", version, about = "Shape registration, surrogate fitting and Bayesian calibration")]
struct Cli {
    /// Worker threads for register and predict-posterior (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run configuration (TOML); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Recompute outputs even when they are up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write toy images and their parameters.
    GenToy(GenToyArgs),
    /// Rigidly align a dataset of point shapes to the measurement.
    Prealign(PrealignArgs),
    /// Register the measurement onto every simulation.
    Register(RegisterArgs),
    /// Fit the GP-PCA surrogate and validate it on a held-out split.
    FitSurrogate(FitArgs),
    /// Sample the posterior of the simulation parameters.
    Calibrate(CalibrateArgs),
    /// Push posterior (or prior) draws forward onto the measurement.
    PredictPosterior(PredictArgs),
}

#[derive(Args)]
pub struct GenToyArgs {
    /// Single parameter vector.
    #[arg(long, num_args = 4, value_names = ["B1", "B2", "B3", "B4"], allow_negative_numbers = true, conflicts_with_all = ["lhs", "bounds"])]
    pub beta: Option<Vec<f64>>,
    /// Latin hypercube design size.
    #[arg(long)]
    pub lhs: Option<usize>,
    /// Design box as `lo1,lo2,lo3,lo4..hi1,hi2,hi3,hi4`.
    #[arg(long)]
    pub bounds: Option<String>,
    /// Design seed; overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = diffcal_core::toy::TOY_SIZE)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PrealignArgs {
    #[arg(long)]
    pub mes: Option<PathBuf>,
    #[arg(long)]
    pub sims: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub mes: Option<PathBuf>,
    #[arg(long)]
    pub sims: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FitArgs {
    /// Output directory of `register`.
    #[arg(long)]
    pub registrations: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    #[arg(long)]
    pub mes: Option<PathBuf>,
    /// Sample the prior only (no surrogate or measurement needed).
    #[arg(long)]
    pub prior_only: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub chain: Option<PathBuf>,
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    #[arg(long)]
    pub mes: Option<PathBuf>,
    /// Number of draws; defaults to `predict.draws`.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Draw parameters from the prior instead of a chain.
    #[arg(long, conflicts_with = "chain")]
    pub from_prior: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use diffcal_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::IntegrationFailure { .. } | E::IllConditioned(_) | E::Diagnostics(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command, &cli.config, cli.jobs, cli.force) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
