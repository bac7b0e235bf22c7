//! Validates, anonymizes, and persists incoming sensor reports.
//!
//! Raw MAC addresses live for exactly one call frame here: a report is
//! checked against the topology, its address replaced by the salted
//! pseudonym, and only the pseudonymous record is handed to the store.
//! The same functions back the HTTP endpoint and the file replay source,
//! so both paths enforce identical rules.

use std::io::BufRead;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crowdcal_core::anonymize::{anonymize, AnonymizeError, SaltConfig};
use crowdcal_core::model::{
    window_for, CameraEvent, ModelError, ProbeRecord, RawProbeReport, ValidatedTopology,
};

use crate::store::{Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("sniffer {0:?} is not registered in the topology")]
    UnknownSniffer(String),
    #[error("camera {0:?} is not registered in the topology")]
    UnknownCamera(String),
    #[error(transparent)]
    Anonymize(#[from] AnonymizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl IngestError {
    /// Stable machine-readable reason code for rejection responses.
    pub fn reason(&self) -> &'static str {
        match self {
            IngestError::UnknownSniffer(_) => "unknown_sniffer",
            IngestError::UnknownCamera(_) => "unknown_camera",
            IngestError::Anonymize(AnonymizeError::MalformedMac(_)) => "malformed_mac",
            IngestError::Anonymize(_) => "salt_config",
            IngestError::Model(ModelError::ZeroCameraCount) => "invalid_count",
            IngestError::Model(_) => "invalid_timestamp",
            IngestError::Store(_) => "storage",
        }
    }
}

/// How a record landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestOutcome {
    /// Persisted and visible to future window finalizations.
    Stored,
    /// Idempotency key already present; nothing written.
    Duplicate,
    /// Persisted with the late flag: its window was already finalized, so
    /// published estimates exclude it.
    Late,
}

/// Shared validation context for both ingestion paths.
pub struct Ingestor {
    topology: ValidatedTopology,
    salt: SaltConfig,
    window_seconds: u32,
    origin: DateTime<Utc>,
}

impl Ingestor {
    pub fn new(
        topology: ValidatedTopology,
        salt: SaltConfig,
        window_seconds: u32,
        origin: DateTime<Utc>,
    ) -> Ingestor {
        Ingestor {
            topology,
            salt,
            window_seconds,
            origin,
        }
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

    fn window_index(&self, at: DateTime<Utc>) -> Result<u64, ModelError> {
        Ok(window_for(at, self.window_seconds, self.origin)?.index)
    }

    /// Anonymizes and persists one probe report.
    pub fn ingest_probe(
        &self,
        store: &mut Store,
        report: &RawProbeReport,
    ) -> Result<IngestOutcome, IngestError> {
        if self.topology.zone_of_sniffer(&report.sniffer_id).is_none() {
            return Err(IngestError::UnknownSniffer(report.sniffer_id.clone()));
        }
        let device = anonymize(&report.mac, &self.salt, report.timestamp)?;
        let late = store.is_finalized(self.window_index(report.timestamp)?);
        let record = ProbeRecord {
            device,
            sniffer_id: report.sniffer_id.clone(),
            timestamp: report.timestamp,
            sequence_number: report.sequence_number,
            rssi: report.rssi,
        };
        let stored = store.append_probe(record, late)?;
        Ok(match (stored, late) {
            (false, _) => IngestOutcome::Duplicate,
            (true, true) => IngestOutcome::Late,
            (true, false) => IngestOutcome::Stored,
        })
    }

    /// Validates and persists one camera event.
    pub fn ingest_camera(
        &self,
        store: &mut Store,
        event: &CameraEvent,
    ) -> Result<IngestOutcome, IngestError> {
        if self.topology.zone_of_camera(&event.camera_id).is_none() {
            return Err(IngestError::UnknownCamera(event.camera_id.clone()));
        }
        event.validate()?;
        let late = store.is_finalized(self.window_index(event.timestamp)?);
        let stored = store.append_camera(event.clone(), late)?;
        Ok(match (stored, late) {
            (false, _) => IngestOutcome::Duplicate,
            (true, true) => IngestOutcome::Late,
            (true, false) => IngestOutcome::Stored,
        })
    }
}

/// Strict aborts on the first bad line (naming it); lenient skips and
/// counts bad lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    Strict,
    Lenient,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("replay i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record at {file}:{line}: {source}")]
    Corrupt {
        file: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("record rejected at {file}:{line}: {source}")]
    Rejected {
        file: String,
        line: usize,
        source: IngestError,
    },
}

/// Counters from one replayed log file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReplayStats {
    pub lines: u64,
    pub stored: u64,
    pub duplicates: u64,
    pub late: u64,
    pub rejected: u64,
    pub corrupt: u64,
}

fn replay_file<T, F>(
    path: &Path,
    mode: ReplayMode,
    mut ingest: F,
) -> Result<ReplayStats, ReplayError>
where
    T: DeserializeOwned,
    F: FnMut(T) -> Result<IngestOutcome, IngestError>,
{
    let file_name = path
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut stats = ReplayStats::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        let record: T = match serde_json::from_str(&line) {
            Ok(record) => record,
            Err(source) => match mode {
                ReplayMode::Strict => {
                    return Err(ReplayError::Corrupt {
                        file: file_name,
                        line: idx + 1,
                        source,
                    })
                }
                ReplayMode::Lenient => {
                    stats.corrupt += 1;
                    continue;
                }
            },
        };
        match ingest(record) {
            Ok(IngestOutcome::Stored) => stats.stored += 1,
            Ok(IngestOutcome::Duplicate) => stats.duplicates += 1,
            Ok(IngestOutcome::Late) => stats.late += 1,
            Err(source @ IngestError::Store(_)) => {
                // Storage failures are never skippable: losing appends
                // silently would corrupt replay determinism.
                return Err(ReplayError::Rejected {
                    file: file_name,
                    line: idx + 1,
                    source,
                });
            }
            Err(source) => match mode {
                ReplayMode::Strict => {
                    return Err(ReplayError::Rejected {
                        file: file_name,
                        line: idx + 1,
                        source,
                    })
                }
                ReplayMode::Lenient => stats.rejected += 1,
            },
        }
    }
    Ok(stats)
}

/// Replays a probe log (one RawProbeReport JSON document per line).
pub fn replay_probe_log(
    ingestor: &Ingestor,
    store: &mut Store,
    path: &Path,
    mode: ReplayMode,
) -> Result<ReplayStats, ReplayError> {
    replay_file::<RawProbeReport, _>(path, mode, |report| ingestor.ingest_probe(store, &report))
}

/// Replays a camera log (one CameraEvent JSON document per line).
pub fn replay_camera_log(
    ingestor: &Ingestor,
    store: &mut Store,
    path: &Path,
    mode: ReplayMode,
) -> Result<ReplayStats, ReplayError> {
    replay_file::<CameraEvent, _>(path, mode, |event| ingestor.ingest_camera(store, &event))
}
