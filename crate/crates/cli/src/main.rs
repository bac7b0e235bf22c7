//! `crowdcal`: one binary that drives the whole system. Subcommands generate
//! synthetic sensor logs, run the live service, replay recorded logs into
//! estimate histories, score those histories against ground truth, and
//! export plot-ready series.
//!
//! Exit codes are fixed so scripts can branch on them: 0 success, 1
//! configuration or I/O failure, 2 invalid command line (from the argument
//! parser), 3 data integrity failure (corrupt or rejected log lines in
//! strict mode, misaligned evaluation inputs, unknown zone filters). All
//! diagnostics go to stderr; stdout carries only machine-readable output.

mod evaluate;
mod export;
mod replay;
mod serve;
mod simulate;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// A subcommand failure, split by which exit code it maps to.
pub enum Failure {
    /// Bad configuration, unreadable input, or an environment problem.
    Config(anyhow::Error),
    /// Inputs were readable but internally inconsistent.
    Data(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 3,
        }
    }

    fn message(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) => e,
        }
    }
}

/// Shorthand constructors so call sites read as intent.
pub fn config_failure(err: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(err.into())
}

pub fn data_failure(err: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(err.into())
}

#[derive(Parser)]
#[command(
    name = "crowdcal",
    about = "Wi-Fi crowd estimation: simulation, ingestion service, replay, and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic probe, camera, and ground-truth logs.
    Simulate(simulate::SimulateArgs),
    /// Run the ingestion service, finalizer, and context broker.
    Serve(serve::ServeArgs),
    /// Replay recorded logs into a deterministic estimate history.
    Replay(replay::ReplayArgs),
    /// Score estimate histories against ground truth.
    Evaluate(evaluate::EvaluateArgs),
    /// Export per-zone estimate series for plotting.
    Export(export::ExportArgs),
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(args) => simulate::run(args),
        Command::Serve(args) => serve::run(args),
        Command::Replay(args) => replay::run(args),
        Command::Evaluate(args) => evaluate::run(args),
        Command::Export(args) => export::run(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}
