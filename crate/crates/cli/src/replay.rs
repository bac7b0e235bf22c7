//! `crowdcal replay`: feed recorded probe and camera logs through the same
//! finalization path the live service uses, with virtual time driven by the
//! logs. Output is a fresh store plus estimate and coefficient CSVs; the
//! run summary goes to stdout as JSON.

use std::path::PathBuf;

use anyhow::anyhow;
use clap::Args;
use crowdcal_core::calibration::Algorithm;
use crowdcal_core::model::{parse_timestamp, validate_topology};
use crowdcal_service::{
    run_replay, ReplayConfig, ReplayError, ReplayMode, ReplayRunError, ServiceConfig,
};

use crate::{config_failure, data_failure, Failure};

#[derive(Args)]
pub struct ReplayArgs {
    /// Service config JSON file; supplies topology, salt, window length,
    /// origin, and default algorithm settings.
    #[arg(long)]
    config: PathBuf,
    /// Probe report log (NDJSON).
    #[arg(long)]
    probes: PathBuf,
    /// Camera event log (NDJSON).
    #[arg(long)]
    camera: PathBuf,
    /// Output directory for the store and CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Calibration algorithm, overriding the config file.
    #[arg(long, value_parser = parse_algorithm)]
    algorithm: Option<Algorithm>,
    /// Training window size for adaptive linear calibration.
    #[arg(long)]
    q: Option<usize>,
    /// Window epoch origin, overriding the config file.
    #[arg(long)]
    origin: Option<String>,
    /// Number of windows to finalize; defaults to covering every event.
    #[arg(long)]
    windows: Option<u64>,
    /// Skip malformed or rejected log lines instead of aborting.
    #[arg(long)]
    lenient: bool,
}

fn parse_algorithm(name: &str) -> Result<Algorithm, String> {
    match name {
        "proportional" => Ok(Algorithm::Proportional),
        "adaptive_linear" => Ok(Algorithm::AdaptiveLinear),
        other => Err(format!(
            "unknown algorithm {other:?}; valid: proportional, adaptive_linear"
        )),
    }
}

pub fn run(args: ReplayArgs) -> Result<(), Failure> {
    let service_config = ServiceConfig::from_file(&args.config).map_err(config_failure)?;
    let topology = validate_topology(service_config.topology.clone()).map_err(config_failure)?;
    let salt = service_config.salt_config().map_err(config_failure)?;

    let origin = match (&args.origin, service_config.origin) {
        (Some(text), _) => parse_timestamp(text).map_err(config_failure)?,
        (None, Some(origin)) => origin,
        (None, None) => {
            return Err(config_failure(anyhow!(
            "replay needs an explicit window origin: set \"origin\" in the config or pass --origin"
        )))
        }
    };

    let replay_config = ReplayConfig {
        algorithm: args.algorithm.unwrap_or(service_config.algorithm),
        q: args.q.unwrap_or(service_config.q),
        window_seconds: service_config.window_seconds,
        origin,
        windows: args.windows,
        mode: if args.lenient {
            ReplayMode::Lenient
        } else {
            ReplayMode::Strict
        },
        salt,
    };

    let summary = run_replay(
        topology,
        &replay_config,
        &args.probes,
        &args.camera,
        &args.out,
    )
    .map_err(|e| match &e {
        // Bad data inside otherwise readable logs is the scriptable
        // "fix your inputs" case; everything else is environmental.
        ReplayRunError::Replay(ReplayError::Corrupt { .. })
        | ReplayRunError::Replay(ReplayError::Rejected { .. }) => data_failure(e),
        _ => config_failure(e),
    })?;

    let stdout = serde_json::to_string_pretty(&summary).map_err(config_failure)?;
    println!("{stdout}");
    Ok(())
}
