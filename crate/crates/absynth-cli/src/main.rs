//! `absynth`: finite-state controller synthesis for stochastic systems,
//! guided by an imitation-learned policy network.
//!
//! Exit codes: 0 success, 2 configuration or artifact-format problem,
//! 3 numerical failure, 4 synthesis finished below its threshold,
//! 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use absynth::Error;

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "absynth", version, about = "Neural-guided controller synthesis")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, default_value = "absynth.toml")]
    config: PathBuf,
    /// Master seed, overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory, overriding the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the coarse grid exhaustively and export expert demonstrations.
    Expert,
    /// Run the guided synthesis loop on expert demonstrations.
    Synthesize {
        /// Expert dataset to train on (default: <out>/expert.csv).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Skip the loop: train the first-round network once, then
        /// synthesize one controller per listed window size.
        #[arg(long, value_delimiter = ',', value_name = "STEPS")]
        sweep_local_steps: Option<Vec<usize>>,
    },
    /// Estimate a synthesized controller's satisfaction rate by simulation.
    Evaluate {
        /// Controller table to check (default: <out>/controller.bin).
        #[arg(long)]
        controller: Option<PathBuf>,
    },
    /// Expert, synthesize and evaluate in sequence for a built-in system.
    Benchmark,
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidFormat { .. }
        | Error::Csv(_)
        | Error::GridDigestMismatch { .. }
        | Error::EmptyDataset(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> absynth::Result<commands::Status> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("cannot size the worker pool: {e}")))?;
    }
    let setup = config::load(&cli.config, cli.seed, cli.out.clone())?;
    match cli.command {
        Command::Expert => commands::expert(&setup),
        Command::Synthesize {
            data,
            sweep_local_steps,
        } => commands::synthesize(&setup, data, sweep_local_steps),
        Command::Evaluate { controller } => commands::evaluate(&setup, controller),
        Command::Benchmark => commands::benchmark(&setup),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(commands::Status::Done) => ExitCode::SUCCESS,
        Ok(commands::Status::ThresholdNotMet) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
