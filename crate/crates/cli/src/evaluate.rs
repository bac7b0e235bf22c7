//! `crowdcal evaluate`: score estimate histories against simulator ground
//! truth. Takes one truth CSV and the estimate CSVs from three replay runs
//! (proportional, adaptive linear q=10, adaptive linear q=100); the
//! uncalibrated baseline row is derived from the raw device counts those
//! files share. Emits a JSON report (stdout or --out) and a human-readable
//! table on stderr.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use crowdcal_core::evaluation::{error_statistics, nrmse, rmse, ErrorStats, EvalError};
use serde::Serialize;

use crate::{config_failure, data_failure, Failure};

#[derive(Args)]
pub struct EvaluateArgs {
    /// Ground truth CSV: zone_id, window_index, true_passages.
    #[arg(long)]
    truth: PathBuf,
    /// Estimates CSV from a proportional-calibration replay.
    #[arg(long)]
    proportional: PathBuf,
    /// Estimates CSV from an adaptive linear replay with q=10.
    #[arg(long)]
    adaptive_q10: PathBuf,
    /// Estimates CSV from an adaptive linear replay with q=100.
    #[arg(long)]
    adaptive_q100: PathBuf,
    /// Restrict scoring to these zones (repeatable); default is every zone
    /// in the truth file.
    #[arg(long)]
    zone: Vec<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One scored algorithm. `nrmse` is null when the selected ground truth is
/// constant (its range normalizer is zero); `improvement_vs_baseline` is the
/// fraction of baseline RMSE removed, null on the baseline row itself.
#[derive(Serialize)]
struct ReportRow {
    algorithm: &'static str,
    n_windows: usize,
    rmse: f64,
    nrmse: Option<f64>,
    errors: ErrorStats,
    improvement_vs_baseline: Option<f64>,
}

#[derive(Serialize)]
struct Report {
    zones: Vec<String>,
    n_windows: usize,
    rows: Vec<ReportRow>,
}

/// Key every input is joined on.
type SeriesKey = (String, u64);

fn read_truth(path: &Path) -> Result<BTreeMap<SeriesKey, f64>, Failure> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("opening truth {}", path.display()))
        .map_err(config_failure)?;
    let mut truth = BTreeMap::new();
    for (i, row) in reader.deserialize::<(String, u64, u64)>().enumerate() {
        let (zone_id, window_index, true_passages) = row
            .with_context(|| format!("truth {} row {}", path.display(), i + 1))
            .map_err(data_failure)?;
        if truth
            .insert((zone_id.clone(), window_index), true_passages as f64)
            .is_some()
        {
            return Err(data_failure(anyhow!(
                "truth {} repeats zone {zone_id} window {window_index}",
                path.display()
            )));
        }
    }
    if truth.is_empty() {
        return Err(data_failure(anyhow!(
            "truth {} has no rows",
            path.display()
        )));
    }
    Ok(truth)
}

struct EstimateEntry {
    raw: f64,
    calibrated: f64,
}

fn read_estimates(path: &Path) -> Result<BTreeMap<SeriesKey, EstimateEntry>, Failure> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("opening estimates {}", path.display()))
        .map_err(config_failure)?;
    let mut estimates = BTreeMap::new();
    type Row = (String, u64, String, u64, f64, f64, bool);
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let (zone_id, window_index, _start, raw, calibrated, _coefficient, _fallback) = row
            .with_context(|| format!("estimates {} row {}", path.display(), i + 1))
            .map_err(data_failure)?;
        estimates.insert(
            (zone_id, window_index),
            EstimateEntry {
                raw: raw as f64,
                calibrated,
            },
        );
    }
    Ok(estimates)
}

/// Truth and estimates must cover exactly the same (zone, window) keys for
/// the selected zones; the first discrepancy is named in the error.
fn check_alignment(
    path: &Path,
    estimates: &BTreeMap<SeriesKey, EstimateEntry>,
    truth: &BTreeMap<SeriesKey, f64>,
    truth_keys: &[SeriesKey],
    zones: &BTreeSet<String>,
) -> Result<(), Failure> {
    for key in truth_keys {
        if !estimates.contains_key(key) {
            return Err(data_failure(anyhow!(
                "estimates {} is missing zone {} window {}",
                path.display(),
                key.0,
                key.1
            )));
        }
    }
    for key in estimates.keys() {
        if zones.contains(&key.0) && !truth.contains_key(key) {
            return Err(data_failure(anyhow!(
                "truth has no zone {} window {}, present in {}",
                key.0,
                key.1,
                path.display()
            )));
        }
    }
    Ok(())
}

fn score(
    algorithm: &'static str,
    estimates: &[f64],
    truth: &[f64],
    baseline_rmse: Option<f64>,
) -> Result<ReportRow, Failure> {
    let row_rmse = rmse(estimates, truth).map_err(data_failure)?;
    let row_nrmse = match nrmse(estimates, truth) {
        Ok(v) => Some(v),
        Err(EvalError::ConstantTruth) => None,
        Err(e) => return Err(data_failure(e)),
    };
    Ok(ReportRow {
        algorithm,
        n_windows: estimates.len(),
        rmse: row_rmse,
        nrmse: row_nrmse,
        errors: error_statistics(estimates, truth).map_err(data_failure)?,
        improvement_vs_baseline: baseline_rmse.map(
            |b| {
                if b == 0.0 {
                    0.0
                } else {
                    1.0 - row_rmse / b
                }
            },
        ),
    })
}

pub fn run(args: EvaluateArgs) -> Result<(), Failure> {
    let truth = read_truth(&args.truth)?;

    let truth_zones: BTreeSet<String> = truth.keys().map(|(z, _)| z.clone()).collect();
    let zones: BTreeSet<String> = if args.zone.is_empty() {
        truth_zones.clone()
    } else {
        for zone in &args.zone {
            if !truth_zones.contains(zone) {
                return Err(data_failure(anyhow!(
                    "unknown zone {zone:?}; truth covers: {}",
                    truth_zones.iter().cloned().collect::<Vec<_>>().join(", ")
                )));
            }
        }
        args.zone.iter().cloned().collect()
    };

    // BTreeMap iteration fixes the series order: by zone, then window.
    let truth_keys: Vec<SeriesKey> = truth
        .keys()
        .filter(|(z, _)| zones.contains(z))
        .cloned()
        .collect();
    let truth_series: Vec<f64> = truth_keys.iter().map(|k| truth[k]).collect();

    let sources = [
        ("proportional", &args.proportional),
        ("adaptive_linear_q10", &args.adaptive_q10),
        ("adaptive_linear_q100", &args.adaptive_q100),
    ];
    let mut raw_series: Option<Vec<f64>> = None;
    let mut calibrated: Vec<(&'static str, Vec<f64>)> = Vec::new();
    for (name, path) in sources {
        let estimates = read_estimates(path)?;
        check_alignment(path, &estimates, &truth, &truth_keys, &zones)?;
        let raw: Vec<f64> = truth_keys.iter().map(|k| estimates[k].raw).collect();
        match &raw_series {
            None => raw_series = Some(raw),
            Some(existing) => {
                // All three replays ran over the same logs, so their raw
                // device counts must agree; a mismatch means the inputs do
                // not belong together.
                if let Some(i) = (0..existing.len()).find(|&i| existing[i] != raw[i]) {
                    return Err(data_failure(anyhow!(
                        "raw counts disagree at zone {} window {}: {} vs {} (is {} from the same logs?)",
                        truth_keys[i].0,
                        truth_keys[i].1,
                        existing[i],
                        raw[i],
                        path.display()
                    )));
                }
            }
        }
        calibrated.push((
            name,
            truth_keys.iter().map(|k| estimates[k].calibrated).collect(),
        ));
    }
    let raw_series = raw_series.expect("three sources scored");

    let baseline = score("wifi_only", &raw_series, &truth_series, None)?;
    let baseline_rmse = baseline.rmse;
    let mut rows = vec![baseline];
    for (name, series) in &calibrated {
        rows.push(score(name, series, &truth_series, Some(baseline_rmse))?);
    }

    let report = Report {
        zones: zones.into_iter().collect(),
        n_windows: truth_series.len(),
        rows,
    };

    print_table(&report);
    let json = serde_json::to_string_pretty(&report).map_err(config_failure)?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n")
            .with_context(|| format!("writing report {}", path.display()))
            .map_err(config_failure)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn print_table(report: &Report) {
    eprintln!(
        "zones: {}   windows: {}",
        report.zones.join(", "),
        report.n_windows
    );
    eprintln!(
        "{:<22} {:>9} {:>7} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7}",
        "algorithm", "rmse", "nrmse", "mean", "std_dev", "min", "q1", "median", "q3", "max", "impr"
    );
    for row in &report.rows {
        let nrmse = row
            .nrmse
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        let improvement = row
            .improvement_vs_baseline
            .map(|v| format!("{:.1}%", v * 100.0))
            .unwrap_or_else(|| "-".into());
        let e = &row.errors;
        eprintln!(
            "{:<22} {:>9.3} {:>7} {:>9.3} {:>8.3} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>7}",
            row.algorithm,
            row.rmse,
            nrmse,
            e.mean,
            e.std_dev,
            e.min,
            e.q1,
            e.median,
            e.q3,
            e.max,
            improvement
        );
    }
}
