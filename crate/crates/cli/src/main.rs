//! Command-line entry point: `run`, `bench`, and `compare` subcommands.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use coordflow_cli::config::parse_config;
use coordflow_cli::runner::{bench_experiment, compare_runs, run_experiment, RunOverrides};

#[derive(Parser)]
#[command(
    name = "coordflow",
    about = "Low-rank tensor solver for advection and Fokker-Planck equations \
             on time-dependent coordinates",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a configured experiment and write CSVs and snapshots.
    Run {
        /// Path to a TOML experiment configuration.
        config: PathBuf,
        /// Write outputs here instead of the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Benchmark snapshot file or directory for live error rows.
        #[arg(long)]
        benchmark: Option<PathBuf>,
        /// Override the configured RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve the same problem densely on the full grid as a benchmark.
    Bench {
        /// Path to a TOML experiment configuration.
        config: PathBuf,
        /// Write benchmark snapshots here instead of `<output_dir>-bench`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Pair run and benchmark snapshots by time and rewrite error.csv.
    Compare {
        /// Directory of a finished run.
        run_dir: PathBuf,
        /// Benchmark snapshot file or directory.
        bench_snapshot: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<coordflow_cli::config::ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            output_dir,
            benchmark,
            seed,
        } => {
            let cfg = load_config(&config)?;
            let over = RunOverrides {
                output_dir,
                benchmark,
                seed,
            };
            let summary = run_experiment(&cfg, &over)?;
            println!(
                "run finished: {} rows, final t = {:e}, rank 1-norm {}, mass {:.12e} -> {}",
                summary.rows,
                summary.final_t,
                summary.final_rank_1norm,
                summary.final_mass,
                summary.dir.display()
            );
        }
        Command::Bench { config, output_dir } => {
            let cfg = load_config(&config)?;
            let dir = bench_experiment(&cfg, output_dir.as_deref())?;
            println!("benchmark written to {}", dir.display());
        }
        Command::Compare {
            run_dir,
            bench_snapshot,
        } => {
            let path = compare_runs(&run_dir, &bench_snapshot)?;
            println!("errors written to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
