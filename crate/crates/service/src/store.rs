//! Append-only persistence with in-memory indexes.
//!
//! Every stream is one newline-delimited JSON file in the store directory;
//! opening a store replays the files to rebuild indexes, so a restart
//! loses nothing. Appends are the only mutation. Records that would
//! duplicate an existing idempotency key are dropped before they reach
//! disk, which is what makes log replays byte-identical.
//!
//! Only anonymized probe records enter this layer; the raw-report type is
//! deliberately not accepted anywhere in this module.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crowdcal_core::model::{CameraEvent, Direction, ProbeRecord};
use crowdcal_core::ZoneEstimate;

use crate::broker::{ContextEntity, Subscription};

pub const PROBE_FILE: &str = "probes.ndjson";
pub const CAMERA_FILE: &str = "camera.ndjson";
pub const ESTIMATE_FILE: &str = "estimates.ndjson";
pub const FINALIZED_FILE: &str = "finalized.ndjson";
pub const ENTITY_FILE: &str = "entities.ndjson";
pub const SUBSCRIPTION_FILE: &str = "subscriptions.ndjson";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store line in {file} at line {line}: {source}")]
    Corrupt {
        file: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("window {0} is already finalized")]
    AlreadyFinalized(u64),
}

/// A probe as persisted: the anonymized record plus its late flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredProbe {
    #[serde(flatten)]
    pub record: ProbeRecord,
    #[serde(default)]
    pub late: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredCamera {
    #[serde(flatten)]
    pub event: CameraEvent,
    #[serde(default)]
    pub late: bool,
}

/// One finalized window: the watermark entry plus the calibration state
/// that produced its estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizationRecord {
    pub window_index: u64,
    pub coefficient: Option<f64>,
    pub training_len: usize,
}

/// Subscription log entries; the subscription set is the fold of these.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum SubscriptionOp {
    Put { subscription: Subscription },
    Delete { subscription_id: String },
}

type ProbeKey = (String, i64, String, u32);
type CameraKey = (String, i64, u8, u32);

fn direction_tag(direction: Direction) -> u8 {
    match direction {
        Direction::MoveIn => 0,
        Direction::MoveOut => 1,
    }
}

pub struct Store {
    dir: PathBuf,
    probe_log: BufWriter<File>,
    camera_log: BufWriter<File>,
    estimate_log: BufWriter<File>,
    finalized_log: BufWriter<File>,
    entity_log: BufWriter<File>,
    subscription_log: BufWriter<File>,
    probes: BTreeMap<ProbeKey, StoredProbe>,
    camera: BTreeMap<CameraKey, StoredCamera>,
    estimates: Vec<ZoneEstimate>,
    finalized: BTreeMap<u64, FinalizationRecord>,
    subscriptions: Vec<Subscription>,
    entity_history_len: u64,
    latest_entities: BTreeMap<String, ContextEntity>,
}

fn probe_key(record: &ProbeRecord) -> ProbeKey {
    (
        record.sniffer_id.clone(),
        record.timestamp.timestamp_millis(),
        record.device.as_str().to_string(),
        record.sequence_number,
    )
}

fn camera_key(event: &CameraEvent) -> CameraKey {
    (
        event.camera_id.clone(),
        event.timestamp.timestamp_millis(),
        direction_tag(event.direction),
        event.count,
    )
}

fn append_writer(path: &Path) -> std::io::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        OpenOptions::new().create(true).append(true).open(path)?,
    ))
}

fn replay_lines<T, F>(path: &Path, mut apply: F) -> Result<(), StoreError>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(T),
{
    if !path.exists() {
        return Ok(());
    }
    let reader = BufReader::new(File::open(path)?);
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| StoreError::Corrupt {
            file: path
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            line: idx + 1,
            source,
        })?;
        apply(value);
    }
    Ok(())
}

impl Store {
    /// Opens (creating if needed) a store directory and rebuilds all
    /// in-memory indexes from the logs.
    pub fn open(dir: &Path) -> Result<Store, StoreError> {
        std::fs::create_dir_all(dir)?;
        let mut probes = BTreeMap::new();
        replay_lines(&dir.join(PROBE_FILE), |p: StoredProbe| {
            probes.insert(probe_key(&p.record), p);
        })?;
        let mut camera = BTreeMap::new();
        replay_lines(&dir.join(CAMERA_FILE), |c: StoredCamera| {
            camera.insert(camera_key(&c.event), c);
        })?;
        let mut estimates = Vec::new();
        replay_lines(&dir.join(ESTIMATE_FILE), |e: ZoneEstimate| {
            estimates.push(e);
        })?;
        let mut finalized = BTreeMap::new();
        replay_lines(&dir.join(FINALIZED_FILE), |f: FinalizationRecord| {
            finalized.insert(f.window_index, f);
        })?;
        let mut subs: BTreeMap<String, Subscription> = BTreeMap::new();
        replay_lines(
            &dir.join(SUBSCRIPTION_FILE),
            |op: SubscriptionOp| match op {
                SubscriptionOp::Put { subscription } => {
                    subs.insert(subscription.subscription_id.clone(), subscription);
                }
                SubscriptionOp::Delete { subscription_id } => {
                    subs.remove(&subscription_id);
                }
            },
        )?;
        let mut entity_history_len = 0;
        let mut latest_entities = BTreeMap::new();
        replay_lines(&dir.join(ENTITY_FILE), |entity: ContextEntity| {
            entity_history_len += 1;
            latest_entities.insert(entity.id.clone(), entity);
        })?;

        Ok(Store {
            probe_log: append_writer(&dir.join(PROBE_FILE))?,
            camera_log: append_writer(&dir.join(CAMERA_FILE))?,
            estimate_log: append_writer(&dir.join(ESTIMATE_FILE))?,
            finalized_log: append_writer(&dir.join(FINALIZED_FILE))?,
            entity_log: append_writer(&dir.join(ENTITY_FILE))?,
            subscription_log: append_writer(&dir.join(SUBSCRIPTION_FILE))?,
            dir: dir.to_path_buf(),
            probes,
            camera,
            estimates,
            finalized,
            subscriptions: subs.into_values().collect(),
            entity_history_len,
            latest_entities,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends one probe unless its idempotency key is already present.
    /// Returns whether the record was stored.
    pub fn append_probe(&mut self, record: ProbeRecord, late: bool) -> Result<bool, StoreError> {
        let key = probe_key(&record);
        if self.probes.contains_key(&key) {
            return Ok(false);
        }
        let stored = StoredProbe { record, late };
        serde_json::to_writer(&mut self.probe_log, &stored)
            .map_err(|e| StoreError::Io(e.into()))?;
        self.probe_log.write_all(b"\n")?;
        self.probes.insert(key, stored);
        Ok(true)
    }

    pub fn append_camera(&mut self, event: CameraEvent, late: bool) -> Result<bool, StoreError> {
        let key = camera_key(&event);
        if self.camera.contains_key(&key) {
            return Ok(false);
        }
        let stored = StoredCamera { event, late };
        serde_json::to_writer(&mut self.camera_log, &stored)
            .map_err(|e| StoreError::Io(e.into()))?;
        self.camera_log.write_all(b"\n")?;
        self.camera.insert(key, stored);
        Ok(true)
    }

    /// Probes for one sniffer with timestamps in [start, end), late records
    /// excluded. Results come back in (timestamp, device, sequence) order.
    pub fn probes_between(
        &self,
        sniffer_id: &str,
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    ) -> Vec<ProbeRecord> {
        let lo = (
            sniffer_id.to_string(),
            start.timestamp_millis(),
            String::new(),
            0u32,
        );
        let hi = (
            sniffer_id.to_string(),
            end.timestamp_millis(),
            String::new(),
            0u32,
        );
        self.probes
            .range(lo..hi)
            .filter(|(_, p)| !p.late)
            .map(|(_, p)| p.record.clone())
            .collect()
    }

    /// Camera events for the given cameras in [start, end), late excluded.
    pub fn camera_between(
        &self,
        camera_ids: &[String],
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    ) -> Vec<CameraEvent> {
        let mut events = Vec::new();
        for camera_id in camera_ids {
            let lo = (camera_id.clone(), start.timestamp_millis(), 0u8, 0u32);
            let hi = (camera_id.clone(), end.timestamp_millis(), 0u8, 0u32);
            events.extend(
                self.camera
                    .range(lo..hi)
                    .filter(|(_, c)| !c.late)
                    .map(|(_, c)| c.event.clone()),
            );
        }
        events
    }

    pub fn append_estimate(&mut self, estimate: &ZoneEstimate) -> Result<(), StoreError> {
        serde_json::to_writer(&mut self.estimate_log, estimate)
            .map_err(|e| StoreError::Io(e.into()))?;
        self.estimate_log.write_all(b"\n")?;
        self.estimates.push(estimate.clone());
        Ok(())
    }

    /// Marks a window finalized. Rejects double finalization, which is the
    /// store-level guarantee behind exactly-once publication.
    pub fn record_finalization(&mut self, record: FinalizationRecord) -> Result<(), StoreError> {
        if self.finalized.contains_key(&record.window_index) {
            return Err(StoreError::AlreadyFinalized(record.window_index));
        }
        serde_json::to_writer(&mut self.finalized_log, &record)
            .map_err(|e| StoreError::Io(e.into()))?;
        self.finalized_log.write_all(b"\n")?;
        self.finalized.insert(record.window_index, record);
        Ok(())
    }

    pub fn is_finalized(&self, window_index: u64) -> bool {
        self.finalized.contains_key(&window_index)
    }

    /// Highest finalized window index, if any window has been finalized.
    pub fn watermark(&self) -> Option<u64> {
        self.finalized.keys().next_back().copied()
    }

    pub fn finalizations(&self) -> impl Iterator<Item = &FinalizationRecord> {
        self.finalized.values()
    }

    pub fn finalized_indices(&self) -> BTreeSet<u64> {
        self.finalized.keys().copied().collect()
    }

    pub fn estimates(&self) -> &[ZoneEstimate] {
        &self.estimates
    }

    pub fn probe_count(&self) -> usize {
        self.probes.len()
    }

    /// Latest timestamp across all stored probes and camera events,
    /// including late ones. Replays use it to size the window range.
    pub fn max_event_timestamp(&self) -> Option<DateTime<Utc>> {
        let probe_max = self.probes.values().map(|p| p.record.timestamp).max();
        let camera_max = self.camera.values().map(|c| c.event.timestamp).max();
        probe_max.into_iter().chain(camera_max).max()
    }

    pub fn camera_count(&self) -> usize {
        self.camera.len()
    }

    pub fn append_entity(&mut self, entity: &ContextEntity) -> Result<(), StoreError> {
        serde_json::to_writer(&mut self.entity_log, entity)
            .map_err(|e| StoreError::Io(e.into()))?;
        self.entity_log.write_all(b"\n")?;
        self.entity_history_len += 1;
        self.latest_entities
            .insert(entity.id.clone(), entity.clone());
        Ok(())
    }

    pub fn entity_history_len(&self) -> u64 {
        self.entity_history_len
    }

    /// Most recent persisted entity document per id, for rebuilding the
    /// broker's latest-value map on startup.
    pub fn latest_entities(&self) -> impl Iterator<Item = &ContextEntity> {
        self.latest_entities.values()
    }

    pub fn put_subscription(&mut self, subscription: &Subscription) -> Result<(), StoreError> {
        let op = SubscriptionOp::Put {
            subscription: subscription.clone(),
        };
        serde_json::to_writer(&mut self.subscription_log, &op)
            .map_err(|e| StoreError::Io(e.into()))?;
        self.subscription_log.write_all(b"\n")?;
        Ok(())
    }

    pub fn delete_subscription(&mut self, subscription_id: &str) -> Result<(), StoreError> {
        let op = SubscriptionOp::Delete {
            subscription_id: subscription_id.to_string(),
        };
        serde_json::to_writer(&mut self.subscription_log, &op)
            .map_err(|e| StoreError::Io(e.into()))?;
        self.subscription_log.write_all(b"\n")?;
        Ok(())
    }

    /// Subscriptions that were live in the logs when the store was opened.
    pub fn restored_subscriptions(&self) -> &[Subscription] {
        &self.subscriptions
    }

    /// Flushes every log to disk. Called after each finalization batch and
    /// before reads by external processes.
    pub fn flush(&mut self) -> Result<(), StoreError> {
        self.probe_log.flush()?;
        self.camera_log.flush()?;
        self.estimate_log.flush()?;
        self.finalized_log.flush()?;
        self.entity_log.flush()?;
        self.subscription_log.flush()?;
        Ok(())
    }
}
