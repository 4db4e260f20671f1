//! `fedpi`: latency benchmarks and federated training runs.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 a run did not
//! reach its target, 4 protocol error, 5 connectivity error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedpi_core::models::ModelKind;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;
pub const EXIT_PROTOCOL: u8 = 4;
pub const EXIT_CONNECTIVITY: u8 = 5;

#[derive(Parser)]
#[command(version, about = "Federated averaging experiments on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward/backward latency versus batch size on synthetic input.
    Bench {
        #[arg(long)]
        model: ModelKind,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        batches: Vec<usize>,
        #[arg(long, default_value_t = fedpi_core::metrics::DEFAULT_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; defaults to FEDPI_OUTPUT_DIR or the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One federated experiment, repeated over the configured seeds.
    Run { config: PathBuf },
    /// `run` once per local-batch count E.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40")]
        e_values: Vec<usize>,
    },
    /// A TCP worker process for a `run` whose transport is `tcp`.
    Worker {
        config: PathBuf,
        #[arg(long)]
        worker_id: u32,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench {
            model,
            batches,
            runs,
            seed,
            out,
        } => commands::bench(model, &batches, runs, seed, out),
        Command::Run { config } => commands::run(&config),
        Command::Sweep { config, e_values } => commands::sweep(&config, &e_values),
        Command::Worker { config, worker_id } => commands::worker(&config, worker_id),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
