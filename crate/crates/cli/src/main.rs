//! Command-line surface: dataset generation, two-phase training, metric
//! evaluation, perturbation robustness sweeps, and the analysis bundle
//! (CSVs, SVG plots, sample grids). Exit codes: 0 success, 2 usage error,
//! 3 data error, 4 numeric failure.

mod cmd_analyze;
mod cmd_eval;
mod cmd_gen;
mod cmd_perturb;
mod cmd_train;
mod grids;
mod manifest;
mod plots;
mod tables;

use clap::{Parser, Subcommand};
use harmonizer_core::Error;
use std::process::ExitCode;

/// Desk-scale multi-rater segmentation toolkit.
#[derive(Parser)]
#[command(name = "harmonizer", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-rater dataset.
    Gen(cmd_gen::GenArgs),
    /// Train phase 1 (backbone + harmonizer), phase 2 (personalizer), or both.
    Train(cmd_train::TrainArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(cmd_eval::EvalArgs),
    /// Robustness sweep over the perturbation grid.
    PerturbEval(cmd_perturb::PerturbArgs),
    /// Analysis bundle: calibration, uncertainty, spectra, sample grids.
    Analyze(cmd_analyze::AnalyzeArgs),
}

/// CLI failures split by exit code: usage problems (2) versus failures from
/// the underlying computation (3, or 4 when numeric).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Seed precedence: explicit flag, then the `HZ_SEED` environment variable,
/// then `None` (callers fall back to their config's seed).
pub fn seed_override(flag: Option<u64>) -> CliResult<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("HZ_SEED") {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("HZ_SEED must be an unsigned integer, got '{raw}'"))),
        Err(_) => Ok(None),
    }
}

/// Split-name flags accepted by eval/analyze commands.
pub fn parse_split(name: &str) -> CliResult<harmonizer_core::synthdata::Split> {
    use harmonizer_core::synthdata::Split;
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!(
            "unknown split '{other}' (expected train, val, or test)"
        ))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen::run(args),
        Command::Train(args) => cmd_train::run(args),
        Command::Eval(args) => cmd_eval::run(args),
        Command::PerturbEval(args) => cmd_perturb::run(args),
        Command::Analyze(args) => cmd_analyze::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric { .. } => ExitCode::from(4),
                _ => ExitCode::from(3),
            }
        }
    }
}
