//! Window finalization and the replay runner.
//!
//! One `Pipeline` owns the calibration state, so finalization is inherently
//! sequential: window n is computed, persisted, and published before window
//! n+1 is considered. The store's finalization log is the watermark; a
//! window index at or below it can never be finalized again, which gives
//! exactly-once publication across restarts.
//!
//! Live serving and offline replay both call [`Pipeline::finalize_window`];
//! the only difference is who decides that a window is due (wall clock vs
//! replay cursor).

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::Serialize;

use crowdcal_core::anonymize::SaltConfig;
use crowdcal_core::calibration::{Algorithm, CalibrationError, CalibrationState};
use crowdcal_core::counting::{camera_total, count_devices, CountingError, WindowProbeSet};
use crowdcal_core::model::{
    format_timestamp, ModelError, TimeWindow, ValidatedTopology, WindowMeasurement,
};
use crowdcal_core::ZoneEstimate;

use crate::broker::{BrokerError, BrokerState, ContextEntity, NotificationJob};
use crate::ingest::{
    replay_camera_log, replay_probe_log, Ingestor, ReplayError, ReplayMode, ReplayStats,
};
use crate::store::{FinalizationRecord, Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Counting(#[from] CountingError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Result of finalizing one window: what was published and the
/// notification deliveries the caller still owes subscribers.
#[derive(Debug)]
pub struct FinalizedWindow {
    pub window: TimeWindow,
    pub estimates: Vec<ZoneEstimate>,
    pub notifications: Vec<NotificationJob>,
    /// Subscription ids purged because they expired.
    pub expired_subscriptions: Vec<String>,
}

pub struct Pipeline {
    topology: ValidatedTopology,
    calibration: CalibrationState,
    window_seconds: u32,
    origin: DateTime<Utc>,
}

impl Pipeline {
    pub fn new(
        topology: ValidatedTopology,
        algorithm: Algorithm,
        q: usize,
        window_seconds: u32,
        origin: DateTime<Utc>,
    ) -> Result<Pipeline, CalibrationError> {
        Ok(Pipeline {
            topology,
            calibration: CalibrationState::new(algorithm, q)?,
            window_seconds,
            origin,
        })
    }

    pub fn topology(&self) -> &ValidatedTopology {
        &self.topology
    }

    pub fn window_seconds(&self) -> u32 {
        self.window_seconds
    }

    pub fn origin(&self) -> DateTime<Utc> {
        self.origin
    }

    /// Index of the next window to finalize: one past the watermark.
    pub fn next_index(&self, store: &Store) -> u64 {
        store.watermark().map_or(0, |w| w + 1)
    }

    /// True when `index` may be finalized at wall-clock `now` given the
    /// late-data grace period.
    pub fn is_due(&self, index: u64, now: DateTime<Utc>, grace_s: u32) -> bool {
        match TimeWindow::from_index(index, self.window_seconds, self.origin) {
            Ok(window) => window.end() + chrono::Duration::seconds(grace_s as i64) <= now,
            Err(_) => false,
        }
    }

    /// Computes, persists, and publishes one window. Fails if the window is
    /// already finalized; never leaves a half-finalized window behind
    /// (estimates are appended before the finalization record, and replays
    /// of the same index are rejected by the store).
    pub fn finalize_window(
        &mut self,
        store: &mut Store,
        broker: &mut BrokerState,
        index: u64,
        now: DateTime<Utc>,
    ) -> Result<FinalizedWindow, PipelineError> {
        if store.is_finalized(index) {
            return Err(PipelineError::Store(StoreError::AlreadyFinalized(index)));
        }
        let window = TimeWindow::from_index(index, self.window_seconds, self.origin)?;

        let choke = self.topology.choke_zone();
        let mut choke_measurement = None;
        let mut others = Vec::new();
        for zone in self.topology.zones() {
            let probes = store.probes_between(&zone.sniffer_id, window.start, window.end());
            let set = WindowProbeSet::new(window, zone, probes)?;
            let device_count = count_devices(&set);
            if zone.zone_id == choke.zone_id {
                let events = store.camera_between(&zone.camera_ids, window.start, window.end());
                let y0 = camera_total(&events, &window)?;
                choke_measurement = Some(WindowMeasurement {
                    window,
                    zone_id: zone.zone_id.clone(),
                    device_count,
                    camera_total: Some(y0),
                });
            } else {
                others.push(WindowMeasurement {
                    window,
                    zone_id: zone.zone_id.clone(),
                    device_count,
                    camera_total: None,
                });
            }
        }
        let choke_measurement = choke_measurement.expect("topology has a choke point");

        let estimates = crowdcal_core::update_and_calibrate(
            &mut self.calibration,
            &choke_measurement,
            &others,
        )?;

        for estimate in &estimates {
            store.append_estimate(estimate)?;
        }
        store.record_finalization(FinalizationRecord {
            window_index: index,
            coefficient: self.calibration.coefficient(),
            training_len: self.calibration.training_len(),
        })?;

        let mut notifications = Vec::new();
        let mut expired_subscriptions = Vec::new();
        for estimate in &estimates {
            let zone = self
                .topology
                .zone(&estimate.zone_id)
                .expect("estimate zones come from the topology");
            let entity = ContextEntity::from_estimate(zone, window, estimate);
            store.append_entity(&entity)?;
            let (jobs, expired) = broker.update(entity, now)?;
            notifications.extend(jobs);
            expired_subscriptions.extend(expired);
        }
        for id in &expired_subscriptions {
            store.delete_subscription(id)?;
        }

        Ok(FinalizedWindow {
            window,
            estimates,
            notifications,
            expired_subscriptions,
        })
    }
}

/// Everything `run_replay` needs besides the input logs.
pub struct ReplayConfig {
    pub algorithm: Algorithm,
    pub q: usize,
    pub window_seconds: u32,
    pub origin: DateTime<Utc>,
    /// Number of windows to finalize. `None` derives it from the last
    /// event timestamp in the logs.
    pub windows: Option<u64>,
    pub mode: ReplayMode,
    pub salt: SaltConfig,
}

/// Counters and artifact paths from one replay run.
#[derive(Debug, Serialize)]
pub struct ReplaySummary {
    pub windows_finalized: u64,
    pub probe_stats: ReplayStats,
    pub camera_stats: ReplayStats,
    pub estimates_csv: PathBuf,
    pub coefficients_csv: PathBuf,
    pub store_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayRunError {
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("replay output i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

/// Ingests the full logs into a fresh store under `out_dir`, finalizes
/// every window in order, and writes `estimates.csv` and
/// `coefficients.csv` into `out_dir`.
///
/// Deterministic by construction: same logs and config produce identical
/// store files and CSVs. Broker state participates (entity history is
/// persisted) but no subscriptions exist, so nothing is delivered.
pub fn run_replay(
    topology: ValidatedTopology,
    config: &ReplayConfig,
    probe_log: &Path,
    camera_log: &Path,
    out_dir: &Path,
) -> Result<ReplaySummary, ReplayRunError> {
    std::fs::create_dir_all(out_dir)?;
    let store_dir = out_dir.join("store");
    let mut store = Store::open(&store_dir)?;
    let mut broker = BrokerState::default();

    let ingestor = Ingestor::new(
        topology.clone(),
        config.salt.clone(),
        config.window_seconds,
        config.origin,
    );
    let probe_stats = replay_probe_log(&ingestor, &mut store, probe_log, config.mode)?;
    let camera_stats = replay_camera_log(&ingestor, &mut store, camera_log, config.mode)?;

    let windows = match config.windows {
        Some(n) => n,
        None => store
            .max_event_timestamp()
            .map(|at| {
                let elapsed_ms = (at - config.origin).num_milliseconds().max(0);
                elapsed_ms as u64 / (config.window_seconds as u64 * 1000) + 1
            })
            .unwrap_or(0),
    };

    let mut pipeline = Pipeline::new(
        topology,
        config.algorithm,
        config.q,
        config.window_seconds,
        config.origin,
    )?;

    // Replay publication uses the window end as "now": virtual time, so
    // outputs cannot depend on the wall clock.
    let mut finalized = Vec::with_capacity(windows as usize);
    for index in 0..windows {
        let window_end = TimeWindow::from_index(index, config.window_seconds, config.origin)
            .map_err(PipelineError::from)?
            .end();
        finalized.push(pipeline.finalize_window(&mut store, &mut broker, index, window_end)?);
    }
    store.flush()?;

    let estimates_csv = out_dir.join("estimates.csv");
    write_estimates_csv(&estimates_csv, finalized.iter().flat_map(|f| &f.estimates))?;
    let coefficients_csv = out_dir.join("coefficients.csv");
    write_coefficients_csv(&coefficients_csv, store.finalizations())?;

    Ok(ReplaySummary {
        windows_finalized: windows,
        probe_stats,
        camera_stats,
        estimates_csv,
        coefficients_csv,
        store_dir,
    })
}

/// Plot-ready estimate series; one row per (window, zone) in finalization
/// order.
pub fn write_estimates_csv<'a>(
    path: &Path,
    estimates: impl Iterator<Item = &'a ZoneEstimate>,
) -> Result<(), ReplayRunError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "zone_id",
        "window_index",
        "window_start",
        "raw_count",
        "calibrated",
        "coefficient_used",
        "fallback",
    ])?;
    for estimate in estimates {
        writer.write_record([
            estimate.zone_id.as_str(),
            &estimate.window.index.to_string(),
            &format_timestamp(estimate.window.start),
            &estimate.raw_count.to_string(),
            &estimate.calibrated.to_string(),
            &estimate.coefficient_used.to_string(),
            if estimate.fallback { "true" } else { "false" },
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Coefficient history; `coefficient` is empty while none is valid yet.
pub fn write_coefficients_csv<'a>(
    path: &Path,
    records: impl Iterator<Item = &'a FinalizationRecord>,
) -> Result<(), ReplayRunError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["window_index", "coefficient", "training_len"])?;
    for record in records {
        writer.write_record([
            record.window_index.to_string(),
            record
                .coefficient
                .map(|c| c.to_string())
                .unwrap_or_default(),
            record.training_len.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crowdcal_core::model::{validate_topology, GeoPoint, RawProbeReport, Zone, ZoneTopology};

    fn topology() -> ValidatedTopology {
        validate_topology(ZoneTopology {
            zones: vec![
                Zone {
                    zone_id: "A".into(),
                    sniffer_id: "sniffer-A".into(),
                    sniffer_mac: None,
                    geolocation: GeoPoint {
                        latitude: 0.0,
                        longitude: 0.0,
                    },
                    is_choke_point: true,
                    camera_ids: vec!["C0".into()],
                },
                Zone {
                    zone_id: "B".into(),
                    sniffer_id: "sniffer-B".into(),
                    sniffer_mac: None,
                    geolocation: GeoPoint {
                        latitude: 0.1,
                        longitude: 0.1,
                    },
                    is_choke_point: false,
                    camera_ids: vec![],
                },
            ],
        })
        .unwrap()
    }

    fn origin() -> DateTime<Utc> {
        DateTime::<Utc>::from_timestamp(1_623_024_000, 0).unwrap()
    }

    fn salt() -> SaltConfig {
        SaltConfig::new(b"0123456789abcdef".to_vec()).unwrap()
    }

    fn probe_at(mac: &str, offset_s: i64, sniffer: &str) -> RawProbeReport {
        RawProbeReport {
            mac: mac.into(),
            sniffer_id: sniffer.into(),
            timestamp: origin() + chrono::Duration::seconds(offset_s),
            sequence_number: 0,
            rssi: None,
        }
    }

    fn camera_at(offset_s: i64, count: u32) -> crowdcal_core::model::CameraEvent {
        crowdcal_core::model::CameraEvent {
            camera_id: "C0".into(),
            direction: crowdcal_core::model::Direction::MoveIn,
            timestamp: origin() + chrono::Duration::seconds(offset_s),
            count,
        }
    }

    fn setup(dir: &Path) -> (Store, BrokerState, Pipeline, Ingestor) {
        let store = Store::open(dir).unwrap();
        let broker = BrokerState::default();
        let pipeline =
            Pipeline::new(topology(), Algorithm::Proportional, 1, 900, origin()).unwrap();
        let ingestor = Ingestor::new(topology(), salt(), 900, origin());
        (store, broker, pipeline, ingestor)
    }

    #[test]
    fn proportional_composition_reaches_the_broker() {
        // Window 0: choke has 2 devices and camera total 4 (a = 2.0); zone
        // B has 1 device, published as 2.
        let dir = tempfile::tempdir().unwrap();
        let (mut store, mut broker, mut pipeline, ingestor) = setup(dir.path());
        ingestor
            .ingest_probe(&mut store, &probe_at("AA:00:00:00:00:01", 10, "sniffer-A"))
            .unwrap();
        ingestor
            .ingest_probe(&mut store, &probe_at("AA:00:00:00:00:02", 20, "sniffer-A"))
            .unwrap();
        ingestor
            .ingest_probe(&mut store, &probe_at("AA:00:00:00:00:03", 30, "sniffer-B"))
            .unwrap();
        ingestor
            .ingest_camera(&mut store, &camera_at(40, 4))
            .unwrap();

        let done = pipeline
            .finalize_window(
                &mut store,
                &mut broker,
                0,
                origin() + chrono::Duration::seconds(930),
            )
            .unwrap();
        assert_eq!(done.estimates.len(), 2);
        assert_eq!(done.estimates[0].zone_id, "A");
        assert_eq!(done.estimates[0].raw_count, 2);
        assert_eq!(done.estimates[1].zone_id, "B");
        assert_eq!(done.estimates[1].calibrated, 2.0);
        assert!(!done.estimates[1].fallback);

        let published = broker.latest("sniffer-B").unwrap();
        assert_eq!(published.attribute.context_value, 2);
        assert_eq!(store.entity_history_len(), 2);
    }

    #[test]
    fn empty_windows_still_publish_zero_estimates() {
        let dir = tempfile::tempdir().unwrap();
        let (mut store, mut broker, mut pipeline, _) = setup(dir.path());
        let done = pipeline
            .finalize_window(&mut store, &mut broker, 0, origin())
            .unwrap();
        assert_eq!(done.estimates.len(), 2);
        assert!(done.estimates.iter().all(|e| e.raw_count == 0));
        assert!(done.estimates.iter().all(|e| e.calibrated == 0.0));
        // d0 = 0 leaves no valid coefficient, so window 0 is fallback.
        assert!(done.estimates.iter().all(|e| e.fallback));
        assert_eq!(broker.query(None, None).len(), 2);
    }

    #[test]
    fn windows_cannot_finalize_twice() {
        let dir = tempfile::tempdir().unwrap();
        let (mut store, mut broker, mut pipeline, _) = setup(dir.path());
        pipeline
            .finalize_window(&mut store, &mut broker, 0, origin())
            .unwrap();
        let err = pipeline
            .finalize_window(&mut store, &mut broker, 0, origin())
            .unwrap_err();
        assert!(matches!(
            err,
            PipelineError::Store(StoreError::AlreadyFinalized(0))
        ));
        assert_eq!(pipeline.next_index(&store), 1);
    }

    #[test]
    fn due_windows_respect_the_grace_period() {
        let dir = tempfile::tempdir().unwrap();
        let (_, _, pipeline, _) = setup(dir.path());
        let end = origin() + chrono::Duration::seconds(900);
        assert!(!pipeline.is_due(0, end, 30));
        assert!(!pipeline.is_due(0, end + chrono::Duration::seconds(29), 30));
        assert!(pipeline.is_due(0, end + chrono::Duration::seconds(30), 30));
    }

    #[test]
    fn replay_is_deterministic_and_counts_every_window() {
        let dir = tempfile::tempdir().unwrap();
        let probe_log = dir.path().join("probes.ndjson");
        let camera_log = dir.path().join("camera.ndjson");
        let mut probe_lines = Vec::new();
        for w in 0..5 {
            for d in 0..(w + 1) {
                let report = probe_at(
                    &format!("AA:00:00:00:0{w}:0{d}"),
                    w as i64 * 900 + d as i64,
                    "sniffer-A",
                );
                probe_lines.push(serde_json::to_string(&report).unwrap());
            }
        }
        std::fs::write(&probe_log, probe_lines.join("\n")).unwrap();
        let camera_lines: Vec<String> = (0..5)
            .map(|w| serde_json::to_string(&camera_at(w * 900 + 5, 2)).unwrap())
            .collect();
        std::fs::write(&camera_log, camera_lines.join("\n")).unwrap();

        let config = ReplayConfig {
            algorithm: Algorithm::AdaptiveLinear,
            q: 2,
            window_seconds: 900,
            origin: origin(),
            windows: None,
            mode: ReplayMode::Strict,
            salt: salt(),
        };
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let summary_a = run_replay(topology(), &config, &probe_log, &camera_log, &out_a).unwrap();
        let _ = run_replay(topology(), &config, &probe_log, &camera_log, &out_b).unwrap();
        assert_eq!(summary_a.windows_finalized, 5);
        assert_eq!(summary_a.probe_stats.stored, 15);

        for name in ["estimates.csv", "coefficients.csv"] {
            let a = std::fs::read(out_a.join(name)).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical replays");
            assert!(!a.is_empty());
        }
        for name in [crate::store::ESTIMATE_FILE, crate::store::PROBE_FILE] {
            let a = std::fs::read(out_a.join("store").join(name)).unwrap();
            let b = std::fs::read(out_b.join("store").join(name)).unwrap();
            assert_eq!(a, b, "store {name} differs between identical replays");
        }

        // Gap-free, duplicate-free finalization.
        let store = Store::open(&summary_a.store_dir).unwrap();
        let indices: Vec<u64> = store.finalized_indices().into_iter().collect();
        assert_eq!(indices, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_logs_replay_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let probe_log = dir.path().join("probes.ndjson");
        let camera_log = dir.path().join("camera.ndjson");
        std::fs::write(&probe_log, "").unwrap();
        std::fs::write(&camera_log, "").unwrap();
        let config = ReplayConfig {
            algorithm: Algorithm::Proportional,
            q: 1,
            window_seconds: 900,
            origin: origin(),
            windows: None,
            mode: ReplayMode::Strict,
            salt: salt(),
        };
        let out = dir.path().join("out");
        let summary = run_replay(topology(), &config, &probe_log, &camera_log, &out).unwrap();
        assert_eq!(summary.windows_finalized, 0);
        let text = std::fs::read_to_string(out.join("estimates.csv")).unwrap();
        assert_eq!(text.lines().count(), 1, "only the header remains");
    }
}
