//! `crowdcal simulate`: run the pedestrian simulator and leave a directory
//! of logs behind. Alongside the three NDJSON streams it writes the ground
//! truth again as CSV (the shape `evaluate` consumes) and the effective
//! scenario config, so a run can be reproduced from its output directory
//! alone.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::Context;
use clap::Args;
use crowdcal_sim::{preset, simulate, GroundTruthRecord, NdjsonDirSink, Preset, ScenarioConfig};

use crate::{config_failure, Failure};

#[derive(Args)]
pub struct SimulateArgs {
    /// Built-in scenario; see --help for names.
    #[arg(long, conflicts_with = "scenario", value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Path to a scenario config JSON file.
    #[arg(long, required_unless_present = "preset")]
    scenario: Option<PathBuf>,
    /// Output directory for probes.ndjson, camera.ndjson, truth.ndjson,
    /// truth.csv, and scenario.json.
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario's random seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_preset(name: &str) -> Result<Preset, String> {
    Preset::from_str(name).map_err(|e| {
        let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
        format!("{e}; valid presets: {}", names.join(", "))
    })
}

pub fn run(args: SimulateArgs) -> Result<(), Failure> {
    let mut config: ScenarioConfig = match (&args.preset, &args.scenario) {
        (Some(which), None) => preset(*which),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading scenario {}", path.display()))
                .map_err(config_failure)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing scenario {}", path.display()))
                .map_err(config_failure)?
        }
        // clap enforces exactly one of the two.
        _ => unreachable!("clap guarantees preset xor scenario"),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(config_failure)?;

    let mut sink = NdjsonDirSink::create(&args.out).map_err(config_failure)?;
    let summary = simulate(&config, &mut sink).map_err(config_failure)?;
    sink.finish().map_err(config_failure)?;

    write_truth_csv(&args.out).map_err(config_failure)?;
    let scenario_json = serde_json::to_string_pretty(&config).map_err(config_failure)?;
    std::fs::write(args.out.join("scenario.json"), scenario_json + "\n")
        .context("writing scenario.json")
        .map_err(config_failure)?;

    let stdout = serde_json::to_string_pretty(&summary).map_err(config_failure)?;
    println!("{stdout}");
    Ok(())
}

/// Re-materializes truth.ndjson as truth.csv keyed by (zone_id, window
/// index), which is the join key `evaluate` uses against estimate CSVs.
fn write_truth_csv(dir: &std::path::Path) -> anyhow::Result<()> {
    let source = std::fs::File::open(dir.join("truth.ndjson")).context("opening truth.ndjson")?;
    let mut writer = csv::Writer::from_path(dir.join("truth.csv")).context("creating truth.csv")?;
    writer.write_record(["zone_id", "window_index", "true_passages"])?;
    for line in std::io::BufRead::lines(std::io::BufReader::new(source)) {
        let line = line?;
        let record: GroundTruthRecord =
            serde_json::from_str(&line).context("parsing truth.ndjson line")?;
        writer.write_record([
            record.zone_id.as_str(),
            &record.window.index.to_string(),
            &record.true_passages.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
