//! The `compare` subcommand: merge finished runs, compute each variant's
//! seed-median evaluation curve, and report when (if ever) it reaches the
//! return threshold, alongside final-return statistics.

use std::fs;
use std::path::{Path, PathBuf};

use lagdyna::report::{curves_by_variant, first_crossing, median, median_curve, read_metrics_csv, MetricsRow};

use crate::CliError;

struct VariantSummary {
    variant: String,
    seeds: usize,
    steps_to_threshold: Option<usize>,
    median_final_return: f64,
}

fn summarize(rows: &[MetricsRow], threshold: f64) -> Result<Vec<VariantSummary>, CliError> {
    let grouped = curves_by_variant(rows);
    if grouped.is_empty() {
        return Err(CliError::Runtime("no metric rows found".into()));
    }
    let mut summaries = Vec::new();
    for (variant, seeds) in grouped {
        let curves: Vec<Vec<(usize, f64)>> = seeds.iter().map(|(_, c)| c.clone()).collect();
        let median_c = median_curve(&curves).map_err(|e| {
            CliError::Runtime(format!(
                "variant {variant}: {e}; were these runs evaluated on the same cadence?"
            ))
        })?;
        let finals: Vec<f64> = curves.iter().filter_map(|c| c.last().map(|p| p.1)).collect();
        let median_final = median(&finals)
            .ok_or_else(|| CliError::Runtime(format!("variant {variant}: no finite final returns")))?;
        summaries.push(VariantSummary {
            variant,
            seeds: seeds.len(),
            steps_to_threshold: first_crossing(&median_c, threshold),
            median_final_return: median_final,
        });
    }
    Ok(summaries)
}

pub fn cmd_compare(dirs: &[PathBuf], threshold: f64, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut hashes: Vec<String> = Vec::new();
    for dir in dirs {
        let path = dir.join("metrics.csv");
        let (hash, mut dir_rows) = read_metrics_csv(&path)
            .map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))?;
        hashes.push(hash);
        rows.append(&mut dir_rows);
    }
    hashes.dedup();
    let hash = if hashes.len() == 1 {
        hashes.pop().unwrap()
    } else {
        "mixed".to_string()
    };

    let summaries = summarize(&rows, threshold)?;

    println!("threshold: {threshold}");
    println!(
        "{:<12} {:>5}  {:>18}  {:>19}",
        "variant", "seeds", "steps-to-threshold", "median-final-return"
    );
    let mut csv = format!(
        "# config_hash={hash}\n# threshold={threshold}\nvariant,seeds,steps_to_threshold,median_final_return\n"
    );
    for s in &summaries {
        let steps_human = s
            .steps_to_threshold
            .map_or_else(|| "not reached".to_string(), |n| n.to_string());
        let steps_csv = s
            .steps_to_threshold
            .map_or_else(|| "not_reached".to_string(), |n| n.to_string());
        println!(
            "{:<12} {:>5}  {:>18}  {:>19.1}",
            s.variant, s.seeds, steps_human, s.median_final_return
        );
        csv.push_str(&format!(
            "{},{},{},{}\n",
            s.variant, s.seeds, steps_csv, s.median_final_return
        ));
    }

    let out = out.unwrap_or_else(|| PathBuf::from("compare.csv"));
    write_compare_csv(&out, &csv)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn write_compare_csv(path: &Path, csv: &str) -> Result<(), CliError> {
    fs::write(path, csv).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}
