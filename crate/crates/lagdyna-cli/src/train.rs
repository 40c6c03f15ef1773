//! The `train` subcommand: run every (variant, seed) pair of the resolved
//! experiment, write per-run outputs as each finishes, then merge the
//! metrics into one CSV.
//!
//! Runs are independent, so seeds execute on a small worker pool capped by
//! `LAGDYNA_THREADS`. Each worker writes only inside its own run directory;
//! the merged CSV and all console output happen on the main thread in job
//! order, keeping every byte of output deterministic.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use lagdyna::dyna::{self, Variant};
use lagdyna::report::{config_hash, rows_from_report, write_loss_trace, write_metrics_csv, MetricsRow};

use crate::config::{resolve, ExperimentConfig, Overrides};
use crate::CliError;

struct JobResult {
    rows: Vec<MetricsRow>,
    summary: String,
    error: Option<String>,
}

fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("LAGDYNA_THREADS") {
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Ok(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!(
                "LAGDYNA_THREADS: expected a positive integer, got {raw:?}"
            ))),
        },
    }
}

fn run_job(cfg: &ExperimentConfig, hash: &str, variant: Variant, seed: u64) -> JobResult {
    let mut dyna_cfg = cfg.dyna.clone();
    dyna_cfg.variant = variant;
    dyna_cfg.seed = seed;
    let name = format!("{}-seed{}", variant.label(), seed);
    let dir = cfg.out.join(&name);

    let mut failure: Option<String>;
    let mut rows = Vec::new();
    let mut curve_note = String::from("no evaluations");

    let outcome = fs::create_dir_all(&dir)
        .map_err(|e| format!("creating {}: {e}", dir.display()))
        .and_then(|()| dyna::run(&dyna_cfg).map_err(|e| e.to_string()));

    match outcome {
        Err(e) => failure = Some(e),
        Ok(report) => {
            failure = report.error.clone();
            rows = rows_from_report(&report);
            if let Some(&(step, ret)) = report.curve.last() {
                curve_note = format!("{} evals, return {ret:.1} at step {step}", report.curve.len());
            }
            let mut write = |what: &str, r: lagdyna::Result<()>| {
                if let (Err(e), None) = (r, failure.as_ref()) {
                    failure = Some(format!("writing {what}: {e}"));
                }
            };
            write("metrics", write_metrics_csv(&dir.join("metrics.csv"), hash, &rows));
            write(
                "policy checkpoint",
                report.policy.save_checkpoint(&dir.join("policy.net")),
            );
            write(
                "critic checkpoint",
                report.critic.save_checkpoint(&dir.join("critic.net")),
            );
            if let Some(model) = &report.model {
                write(
                    "model checkpoint",
                    model.save_checkpoint(&dir.join("model.net"), "dynamics model"),
                );
                write(
                    "model loss trace",
                    write_loss_trace(&dir.join("model_loss.csv"), &report.model_loss_trace),
                );
            }
        }
    }

    let summary = match &failure {
        None => format!("{name}: {curve_note}"),
        Some(e) => format!("{name}: FAILED ({e}); partial outputs kept"),
    };
    JobResult {
        rows,
        summary,
        error: failure,
    }
}

pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let text = fs::read_to_string(config_path).map_err(|e| {
        CliError::Config(format!("{}: {e}", config_path.display()))
    })?;
    let cfg = resolve(&text, overrides)
        .map_err(|msg| CliError::Config(format!("{}: {msg}", config_path.display())))?;

    let dump = cfg.canonical_dump();
    let hash = config_hash(&dump);
    fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", cfg.out.display())))?;
    fs::write(
        cfg.out.join("metadata.txt"),
        format!("{dump}config_hash={hash}\n"),
    )
    .map_err(|e| CliError::Runtime(format!("writing metadata: {e}")))?;

    let jobs: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let workers = thread_cap()?.min(jobs.len()).max(1);

    let mut results: Vec<Option<JobResult>> = Vec::new();
    results.resize_with(jobs.len(), || None);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let next = &next;
        let (tx, rx) = mpsc::channel::<(usize, JobResult)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let cfg = &cfg;
            let hash = &hash;
            let jobs = &jobs;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(variant, seed)) = jobs.get(i) else {
                    break;
                };
                let result = run_job(cfg, hash, variant, seed);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, result) in rx {
            results[i] = Some(result);
        }
    });

    let mut merged: Vec<MetricsRow> = Vec::new();
    let mut failures = 0usize;
    for slot in &results {
        let result = slot.as_ref().expect("every job reports");
        println!("{}", result.summary);
        merged.extend(result.rows.iter().cloned());
        failures += result.error.is_some() as usize;
    }
    let merged_path = cfg.out.join("metrics.csv");
    write_metrics_csv(&merged_path, &hash, &merged)
        .map_err(|e| CliError::Runtime(format!("writing merged metrics: {e}")))?;
    println!("wrote {}", merged_path.display());

    if failures > 0 {
        return Err(CliError::Runtime(format!(
            "{failures} of {} runs failed; partial outputs are in {}",
            jobs.len(),
            cfg.out.display()
        )));
    }
    Ok(())
}
