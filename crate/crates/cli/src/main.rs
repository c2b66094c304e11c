//! Config-driven command line for federated domain-generalization
//! experiments: single runs, sweeps, report aggregation, partition-plan
//! verification and dataset-difficulty metrics.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit code 2).
    Config(String),
    /// Execution failure (exit code 3).
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fedshift",
    version,
    about = "Federated domain-generalization simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured runs and write metrics, selection and
    /// optional difficulty artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides FEDSHIFT_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Execute one sub-run per value of the config's sweep axis and write
    /// a combined summary.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Concurrent sweep points.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Aggregate metrics CSVs into mean and std per configuration point.
    Report {
        /// Metrics CSV files.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a partition plan against domain sizes and print the
    /// constraint report.
    VerifyPlan {
        #[arg(long)]
        plan: PathBuf,
        /// Comma-separated per-domain sample counts, e.g. 10,20,30.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Compute the dataset difficulty ratios for the configured data.
    Difficulty {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = commands::read_config(&config, seed)?;
            let out_dir = commands::resolve_out_dir(out, &cfg)?;
            commands::cmd_run(&cfg, &out_dir)
        }
        Command::Sweep {
            config,
            out,
            seed,
            jobs,
        } => {
            let cfg = commands::read_config(&config, seed)?;
            let out_dir = commands::resolve_out_dir(out, &cfg)?;
            commands::cmd_sweep(&cfg, &out_dir, jobs)
        }
        Command::Report { inputs, out } => commands::cmd_report(&inputs, &out),
        Command::VerifyPlan { plan, sizes } => commands::cmd_verify_plan(&plan, &sizes),
        Command::Difficulty { config, out, seed } => {
            let cfg = commands::read_config(&config, seed)?;
            let out_dir = commands::resolve_out_dir(out, &cfg)?;
            commands::cmd_difficulty(&cfg, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(3),
            }
        }
    }
}
