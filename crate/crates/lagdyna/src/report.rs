//! Serialization of run results: evaluation-curve CSVs, model-loss traces,
//! config fingerprints, and the curve aggregation used when comparing runs.
//!
//! Files are written deterministically (fixed row order, shortest
//! round-trip float formatting, no timestamps) so identical runs produce
//! byte-identical outputs.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dyna::RunReport;
use crate::error::{Error, Result};

/// Header shared by every metrics CSV.
pub const METRICS_HEADER: &str = "variant,seed,env_steps,avg_return";

/// One evaluation point of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub seed: u64,
    pub env_steps: usize,
    pub avg_return: f64,
}

/// Hex SHA-256 of a canonical config dump; stamped into every CSV so
/// results can always be traced back to their exact configuration.
pub fn config_hash(dump: &str) -> String {
    let digest = Sha256::digest(dump.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Join key-value pairs into the canonical `key=value` dump used for both
/// metadata files and hashing.
pub fn canonical_kv(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Flatten a finished run into metric rows, one per evaluation point.
pub fn rows_from_report(report: &RunReport) -> Vec<MetricsRow> {
    report
        .curve
        .iter()
        .map(|&(env_steps, avg_return)| MetricsRow {
            variant: report.variant.label().to_string(),
            seed: report.seed,
            env_steps,
            avg_return,
        })
        .collect()
}

fn check_field(what: &'static str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(',') || s.contains('\n') {
        return Err(Error::invalid(what, format!("{s:?} not CSV-safe")));
    }
    Ok(())
}

/// Render rows as a metrics CSV with the config hash on a leading comment
/// line.
pub fn metrics_csv_string(hash: &str, rows: &[MetricsRow]) -> Result<String> {
    check_field("config hash", hash)?;
    let mut out = format!("# config_hash={hash}\n{METRICS_HEADER}\n");
    for row in rows {
        check_field("variant", &row.variant)?;
        if !row.avg_return.is_finite() {
            return Err(Error::NonFinite("avg_return"));
        }
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.variant, row.seed, row.env_steps, row.avg_return
        ));
    }
    Ok(out)
}

pub fn write_metrics_csv(path: &Path, hash: &str, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_csv_string(hash, rows)?)?;
    Ok(())
}

/// Parse a metrics CSV, returning the embedded config hash and the rows.
/// The hash line, the header, and every field are validated.
pub fn read_metrics_csv(path: &Path) -> Result<(String, Vec<MetricsRow>)> {
    let text = fs::read_to_string(path)?;
    parse_metrics_csv(&text).map_err(|e| match e {
        Error::InvalidArgument { what, detail } => Error::InvalidArgument {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn parse_metrics_csv(text: &str) -> Result<(String, Vec<MetricsRow>)> {
    let mut lines = text.lines();
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .ok_or_else(|| Error::invalid("metrics csv", "missing the config_hash comment line"))?
        .to_string();
    let header = lines.next().unwrap_or("");
    if header != METRICS_HEADER {
        return Err(Error::invalid(
            "metrics csv",
            format!("header {header:?}, expected {METRICS_HEADER:?}"),
        ));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::invalid(
                "metrics csv",
                format!("row {}: expected 4 fields, got {}", i + 3, fields.len()),
            ));
        }
        let parse_err = |field: &str, value: &str| {
            Error::invalid("metrics csv", format!("row {}: bad {field} {value:?}", i + 3))
        };
        rows.push(MetricsRow {
            variant: fields[0].to_string(),
            seed: fields[1].parse().map_err(|_| parse_err("seed", fields[1]))?,
            env_steps: fields[2]
                .parse()
                .map_err(|_| parse_err("env_steps", fields[2]))?,
            avg_return: fields[3]
                .parse()
                .map_err(|_| parse_err("avg_return", fields[3]))?,
        });
    }
    Ok((hash, rows))
}

/// Write the normalized model-loss trace, one training event per row.
pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut out = String::from("event,normalized_loss\n");
    for (i, loss) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{loss}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Median, averaging the two central values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Pointwise median of several evaluation curves. All curves must share
/// the same env-step grid; mismatched grids are a caller error, not
/// something to silently interpolate over.
pub fn median_curve(curves: &[Vec<(usize, f64)>]) -> Result<Vec<(usize, f64)>> {
    let first = curves
        .first()
        .ok_or(Error::EmptyBatch("median curve"))?;
    for c in curves {
        if c.len() != first.len() || c.iter().zip(first).any(|(a, b)| a.0 != b.0) {
            return Err(Error::invalid(
                "evaluation curves",
                "env-step grids are not aligned across runs",
            ));
        }
    }
    first
        .iter()
        .enumerate()
        .map(|(i, &(step, _))| {
            let at_step: Vec<f64> = curves.iter().map(|c| c[i].1).collect();
            median(&at_step)
                .map(|m| (step, m))
                .ok_or(Error::NonFinite("evaluation return"))
        })
        .collect()
}

/// First env-step count at which the curve reaches the threshold, or
/// `None` if it never does.
pub fn first_crossing(curve: &[(usize, f64)], threshold: f64) -> Option<usize> {
    curve
        .iter()
        .find(|&&(_, ret)| ret >= threshold)
        .map(|&(step, _)| step)
}

/// Group rows by variant and rebuild each run's curve, keyed by seed.
pub fn curves_by_variant(
    rows: &[MetricsRow],
) -> Vec<(String, Vec<(u64, Vec<(usize, f64)>)>)> {
    let mut variants: Vec<(String, Vec<(u64, Vec<(usize, f64)>)>)> = Vec::new();
    for row in rows {
        let variant = match variants.iter_mut().find(|(v, _)| *v == row.variant) {
            Some(v) => v,
            None => {
                variants.push((row.variant.clone(), Vec::new()));
                variants.last_mut().unwrap()
            }
        };
        let seeds = &mut variant.1;
        let curve = match seeds.iter_mut().find(|(s, _)| *s == row.seed) {
            Some(s) => s,
            None => {
                seeds.push((row.seed, Vec::new()));
                seeds.last_mut().unwrap()
            }
        };
        curve.1.push((row.env_steps, row.avg_return));
    }
    variants
}
