//! `crowdcal export`: turn an estimate history into plot-ready per-zone
//! series of (window_start, raw, calibrated, coefficient, fallback). CSV
//! keeps one row per window (all-zone exports gain a leading zone_id
//! column); JSON groups the series into an object keyed by zone_id.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::{config_failure, data_failure, Failure};

#[derive(Args)]
pub struct ExportArgs {
    /// Estimates CSV produced by replay (or by the live store's history).
    #[arg(long)]
    estimates: PathBuf,
    /// Export only this zone.
    #[arg(long)]
    zone: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Serialize)]
struct SeriesPoint {
    window_start: String,
    raw: u64,
    calibrated: f64,
    coefficient: f64,
    fallback: bool,
}

pub fn run(args: ExportArgs) -> Result<(), Failure> {
    let mut reader = csv::Reader::from_path(&args.estimates)
        .with_context(|| format!("opening estimates {}", args.estimates.display()))
        .map_err(config_failure)?;

    // (window_index, point) per zone; the index orders the series.
    let mut series: BTreeMap<String, Vec<(u64, SeriesPoint)>> = BTreeMap::new();
    type Row = (String, u64, String, u64, f64, f64, bool);
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let (zone_id, window_index, window_start, raw, calibrated, coefficient, fallback) = row
            .with_context(|| format!("estimates {} row {}", args.estimates.display(), i + 1))
            .map_err(data_failure)?;
        series.entry(zone_id).or_default().push((
            window_index,
            SeriesPoint {
                window_start,
                raw,
                calibrated,
                coefficient,
                fallback,
            },
        ));
    }

    if let Some(zone) = &args.zone {
        // An empty history has no zones to know about, so the filter only
        // fails once there is data that provably lacks the zone.
        if !series.is_empty() && !series.contains_key(zone) {
            return Err(data_failure(anyhow!(
                "unknown zone {zone:?}; history covers: {}",
                series.keys().cloned().collect::<Vec<_>>().join(", ")
            )));
        }
        series.retain(|zone_id, _| zone_id == zone);
    }
    for points in series.values_mut() {
        points.sort_by_key(|(index, _)| *index);
    }

    let rendered = match args.format {
        Format::Csv => render_csv(&series, args.zone.is_some()).map_err(config_failure)?,
        Format::Json => {
            let keyed: BTreeMap<&String, Vec<&SeriesPoint>> = series
                .iter()
                .map(|(zone, points)| (zone, points.iter().map(|(_, p)| p).collect()))
                .collect();
            serde_json::to_string_pretty(&keyed).map_err(config_failure)? + "\n"
        }
    };

    match &args.out {
        Some(path) => std::fs::write(path, rendered)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(config_failure)?,
        None => {
            std::io::stdout()
                .write_all(rendered.as_bytes())
                .context("writing stdout")
                .map_err(config_failure)?;
        }
    }
    Ok(())
}

fn render_csv(
    series: &BTreeMap<String, Vec<(u64, SeriesPoint)>>,
    single_zone: bool,
) -> anyhow::Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let point_columns = [
        "window_start",
        "raw",
        "calibrated",
        "coefficient",
        "fallback",
    ];
    if single_zone {
        writer.write_record(point_columns)?;
    } else {
        let mut header = vec!["zone_id"];
        header.extend(point_columns);
        writer.write_record(header)?;
    }
    for (zone_id, points) in series {
        for (_, p) in points {
            let fields = [
                p.window_start.clone(),
                p.raw.to_string(),
                p.calibrated.to_string(),
                p.coefficient.to_string(),
                p.fallback.to_string(),
            ];
            if single_zone {
                writer.write_record(&fields)?;
            } else {
                let mut record = vec![zone_id.clone()];
                record.extend(fields);
                writer.write_record(&record)?;
            }
        }
    }
    Ok(String::from_utf8(writer.into_inner()?)?)
}
