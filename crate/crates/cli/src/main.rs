//! `bitefuse` command-line front end.

mod commands;
mod run;

use std::process::ExitCode;

use bitefuse::ErrorKind;
use clap::{Parser, Subcommand};

use crate::commands::{ci, eval, fuse, report, simulate, split};

#[derive(Parser, Debug)]
#[command(name = "bitefuse", version, about = "Consensus boxes from multiple annotators, and detection metrics with bootstrap intervals")]
struct Cli {
    /// Worker threads for fusion, evaluation and bootstrap (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter, merge grades and fuse annotator boxes into a consensus set.
    Fuse(fuse::Args),
    /// Score predictions against ground truth (AP, F1, FNR per class).
    Eval(eval::Args),
    /// BCa bootstrap confidence interval of one metric.
    Ci(ci::Args),
    /// Seeded k-fold assignment with train/validation/test rotations.
    Split(split::Args),
    /// Generate synthetic ground truth and annotator files.
    Simulate(simulate::Args),
    /// Mean ± std across per-fold evaluation reports.
    Report(report::Args),
}

/// Error category raised by the CLI itself rather than by the library.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    CliError {
        kind: ErrorKind::Config,
        message: message.into(),
    }
    .into()
}

pub fn validation_error(message: impl Into<String>) -> anyhow::Error {
    CliError {
        kind: ErrorKind::Validation,
        message: message.into(),
    }
    .into()
}

pub fn parse_error(message: impl Into<String>) -> anyhow::Error {
    CliError {
        kind: ErrorKind::Parse,
        message: message.into(),
    }
    .into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err.chain().find_map(|cause| {
        cause
            .downcast_ref::<bitefuse::Error>()
            .map(bitefuse::Error::kind)
            .or_else(|| cause.downcast_ref::<CliError>().map(|e| e.kind))
    });
    match kind {
        Some(ErrorKind::Parse) => 2,
        Some(ErrorKind::Validation) => 3,
        Some(ErrorKind::Config) => 4,
        Some(ErrorKind::Internal) | None => 5,
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(config_error("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError {
                kind: ErrorKind::Internal,
                message: format!("cannot start worker pool: {e}"),
            })?;
    }
    let jobs = rayon::current_num_threads();
    match cli.command {
        Command::Fuse(a) => fuse::run(a, jobs),
        Command::Eval(a) => eval::run(a, jobs),
        Command::Ci(a) => ci::run(a, jobs),
        Command::Split(a) => split::run(a, jobs),
        Command::Simulate(a) => simulate::run(a, jobs),
        Command::Report(a) => report::run(a, jobs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BITEFUSE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
