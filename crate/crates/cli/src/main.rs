//! `elrdyn`: run effective learning rate simulations from scenario files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use commands::RunOptions;
use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "elrdyn",
    version,
    about = "Layer-wise effective learning rate dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Deterministic simulation of one schedule.
    Simulate(CommonArgs),
    /// Simulate several schedules and rank them.
    Compare(CommonArgs),
    /// Monte Carlo random-walk ensemble against the deterministic model.
    Mc(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Scenario file (JSON).
    config: PathBuf,
    /// Override the Monte Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for relative output paths.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Keep every n-th trajectory row.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    record_every: Option<u64>,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var("ELRDYN_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                CliError::Config(format!(
                    "ELRDYN_THREADS must be a positive integer, got '{v}'"
                ))
            }),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (args, cmd): (&CommonArgs, fn(&_, &_) -> _) = match &cli.command {
        Command::Simulate(a) => (a, commands::simulate),
        Command::Compare(a) => (a, commands::compare),
        Command::Mc(a) => (a, commands::monte_carlo),
    };
    let cfg = config::load(&args.config)?;
    let opts = RunOptions {
        out_dir: args.out_dir.clone(),
        seed: args.seed,
        record_every: args.record_every,
        quiet: args.quiet,
        thread_cap: thread_cap()?,
    };
    commands::ensure_dir(&opts.out_dir)?;
    cmd(&cfg, &opts)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("elrdyn: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
