//! `lagdyna`: train and compare model-based swing-up agents, and audit the
//! numerical kernels they rely on.
//!
//! Exit codes: 0 success, 1 runtime failure (partial outputs are kept),
//! 2 configuration or usage error.

mod compare;
mod config;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Overrides;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or usage; nothing was run. Exit 2.
    Config(String),
    /// Failure while running; partial outputs may exist. Exit 1.
    Runtime(String),
}

#[derive(Parser)]
#[command(name = "lagdyna", version, about = "Pendulum swing-up with a learned Lagrangian dynamics model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured experiment, one run per (variant, seed).
    Train {
        /// Experiment config file (key = value with [section] headers).
        #[arg(long)]
        config: PathBuf,
        /// Run only this variant (lnn-adam, lnn-ekf, or mfrl).
        #[arg(long)]
        variant: Option<String>,
        /// Comma-separated seed list, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize finished runs: seed-median curves and steps-to-threshold.
    Compare {
        /// Return level the median curve must reach.
        #[arg(long, default_value_t = -300.0, allow_hyphen_values = true)]
        threshold: f64,
        /// Where to write the summary CSV (default: compare.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run directories produced by `train`.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Audit the numerical kernels against independent oracles.
    Check {
        /// Seed for the randomized oracle checks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn cmd_check(seed: u64) -> Result<(), CliError> {
    let outcomes = lagdyna::checks::run_all(seed);
    let mut failed = 0usize;
    for o in &outcomes {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", o.name, o.detail);
        failed += (!o.pass) as usize;
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} checks failed",
            outcomes.len()
        )));
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train {
            config,
            variant,
            seeds,
            out,
        } => train::cmd_train(&config, &Overrides { variant, seeds, out }),
        Cmd::Compare {
            threshold,
            out,
            dirs,
        } => compare::cmd_compare(&dirs, threshold, out),
        Cmd::Check { seed } => cmd_check(seed),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
