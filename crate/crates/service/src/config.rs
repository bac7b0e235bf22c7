//! Service configuration: the JSON config file, environment overrides, and
//! assembly of a running service from its parts.

use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crowdcal_core::anonymize::{AnonymizeError, SaltConfig};
use crowdcal_core::calibration::{Algorithm, CalibrationError};
use crowdcal_core::model::{timefmt, validate_topology, TopologyErrors, ZoneTopology};

use crate::broker::{BrokerState, NotificationJob};
use crate::http::{AppState, NotifyPolicy, ServiceInner};
use crate::ingest::Ingestor;
use crate::pipeline::Pipeline;
use crate::store::{Store, StoreError};

pub const DEFAULT_WINDOW_SECONDS: u32 = 900;
pub const DEFAULT_GRACE_SECONDS: u32 = 30;
pub const DEFAULT_POLL_INTERVAL_MS: u64 = 100;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Topology(#[from] TopologyErrors),
    #[error(transparent)]
    Salt(#[from] AnonymizeError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("override {name}={value:?} is not a valid {expected}")]
    BadOverride {
        name: &'static str,
        value: String,
        expected: &'static str,
    },
    #[error(
        "store at {store_dir} was created with window_seconds={stored}, config says {configured}"
    )]
    WindowMismatch {
        store_dir: PathBuf,
        stored: u32,
        configured: u32,
    },
    #[error("store at {store_dir} was created with origin {stored}, config says {configured}")]
    OriginMismatch {
        store_dir: PathBuf,
        stored: DateTime<Utc>,
        configured: DateTime<Utc>,
    },
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_window_seconds() -> u32 {
    DEFAULT_WINDOW_SECONDS
}

fn default_grace() -> u32 {
    DEFAULT_GRACE_SECONDS
}

fn default_poll() -> u64 {
    DEFAULT_POLL_INTERVAL_MS
}

fn default_algorithm() -> Algorithm {
    Algorithm::AdaptiveLinear
}

fn default_q() -> usize {
    10
}

fn default_notify_attempts() -> u32 {
    3
}

fn default_notify_backoff_ms() -> u64 {
    1000
}

/// The JSON config file for `serve` (and defaults for `replay`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub store_dir: PathBuf,
    /// Hex-encoded salt, 16 bytes minimum once decoded.
    pub salt: String,
    #[serde(default)]
    pub salt_rotation_seconds: Option<u32>,
    #[serde(default = "default_window_seconds")]
    pub window_seconds: u32,
    /// Epoch of the window tiling. Defaults to service first-start time
    /// rounded down to a whole window; persisted with the store either way.
    #[serde(default, with = "timefmt_opt")]
    pub origin: Option<DateTime<Utc>>,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_grace")]
    pub finalization_grace_seconds: u32,
    #[serde(default = "default_poll")]
    pub poll_interval_ms: u64,
    #[serde(default = "default_notify_attempts")]
    pub notify_attempts: u32,
    #[serde(default = "default_notify_backoff_ms")]
    pub notify_backoff_ms: u64,
    pub topology: ZoneTopology,
}

/// Serde adapter: optional timestamp in the standard wire format.
mod timefmt_opt {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        value: &Option<DateTime<Utc>>,
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        match value {
            Some(t) => serializer.serialize_some(&crowdcal_core::model::format_timestamp(*t)),
            None => serializer.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<Option<DateTime<Utc>>, D::Error> {
        let raw: Option<String> = Option::deserialize(deserializer)?;
        raw.map(|s| crowdcal_core::model::parse_timestamp(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<ServiceConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies the documented environment overrides. Values are passed in
    /// so callers control the environment lookup.
    pub fn apply_overrides(
        &mut self,
        salt: Option<String>,
        poll_interval_ms: Option<String>,
        window_seconds: Option<String>,
    ) -> Result<(), ConfigError> {
        if let Some(salt) = salt {
            self.salt = salt;
        }
        if let Some(raw) = poll_interval_ms {
            self.poll_interval_ms = raw.parse().map_err(|_| ConfigError::BadOverride {
                name: "POLL_INTERVAL_MS",
                value: raw,
                expected: "integer (milliseconds)",
            })?;
        }
        if let Some(raw) = window_seconds {
            self.window_seconds = raw.parse().map_err(|_| ConfigError::BadOverride {
                name: "WINDOW_SECONDS",
                value: raw,
                expected: "integer (seconds)",
            })?;
        }
        Ok(())
    }

    /// Reads SALT, POLL_INTERVAL_MS, and WINDOW_SECONDS from the process
    /// environment.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        self.apply_overrides(
            std::env::var("SALT").ok(),
            std::env::var("POLL_INTERVAL_MS").ok(),
            std::env::var("WINDOW_SECONDS").ok(),
        )
    }

    pub fn salt_config(&self) -> Result<SaltConfig, ConfigError> {
        let salt = match self.salt_rotation_seconds {
            None => SaltConfig::from_hex(&self.salt)?,
            Some(rotation_s) => {
                let bytes = hex::decode(self.salt.trim())
                    .map_err(|_| AnonymizeError::SaltNotHex(self.salt.clone()))?;
                SaltConfig::with_rotation(bytes, rotation_s, self.window_seconds)?
            }
        };
        Ok(salt)
    }

    pub fn notify_policy(&self) -> NotifyPolicy {
        NotifyPolicy {
            attempts: self.notify_attempts,
            initial_backoff: Duration::from_millis(self.notify_backoff_ms),
        }
    }
}

/// Window timing stamped into the store directory at first start so
/// restarts (and config edits) cannot silently shift the tiling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StoreMeta {
    #[serde(with = "timefmt")]
    pub origin: DateTime<Utc>,
    pub window_seconds: u32,
}

const META_FILE: &str = "meta.json";

/// Loads or establishes the store's timing metadata.
///
/// First start: origin comes from the config, or failing that `now`
/// rounded down to a whole window since the Unix epoch. Later starts must
/// agree with what is stamped.
pub fn resolve_timing(
    store_dir: &Path,
    configured_origin: Option<DateTime<Utc>>,
    window_seconds: u32,
    now: DateTime<Utc>,
) -> Result<StoreMeta, ConfigError> {
    let path = store_dir.join(META_FILE);
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read {
            path: path.clone(),
            source,
        })?;
        let meta: StoreMeta = serde_json::from_str(&text)?;
        if meta.window_seconds != window_seconds {
            return Err(ConfigError::WindowMismatch {
                store_dir: store_dir.to_path_buf(),
                stored: meta.window_seconds,
                configured: window_seconds,
            });
        }
        if let Some(origin) = configured_origin {
            if origin != meta.origin {
                return Err(ConfigError::OriginMismatch {
                    store_dir: store_dir.to_path_buf(),
                    stored: meta.origin,
                    configured: origin,
                });
            }
        }
        return Ok(meta);
    }

    let origin = configured_origin.unwrap_or_else(|| {
        let window_ms = window_seconds as i64 * 1000;
        let floored = (now.timestamp_millis() / window_ms) * window_ms;
        DateTime::<Utc>::from_timestamp_millis(floored).expect("floored timestamp in range")
    });
    let meta = StoreMeta {
        origin,
        window_seconds,
    };
    std::fs::create_dir_all(store_dir).map_err(|source| ConfigError::Read {
        path: store_dir.to_path_buf(),
        source,
    })?;
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?)
        .map_err(|source| ConfigError::Read { path, source })?;
    Ok(meta)
}

/// A fully assembled service, ready to be served and driven.
pub struct Service {
    pub state: AppState,
    pub notify_rx: mpsc::UnboundedReceiver<NotificationJob>,
    pub meta: StoreMeta,
    pub config: ServiceConfig,
}

/// Opens the store, restores broker state, and wires up the shared
/// application state for the HTTP server and finalizer loop.
pub fn build_service(config: ServiceConfig, now: DateTime<Utc>) -> Result<Service, ConfigError> {
    let topology = validate_topology(config.topology.clone())?;
    let salt = config.salt_config()?;
    let meta = resolve_timing(&config.store_dir, config.origin, config.window_seconds, now)?;
    let store = Store::open(&config.store_dir)?;

    let mut broker = BrokerState::default();
    for entity in store.latest_entities() {
        broker.restore_latest(entity.clone());
    }
    for sub in store.restored_subscriptions() {
        broker.restore_subscription(sub.clone());
    }

    let pipeline = Pipeline::new(
        topology.clone(),
        config.algorithm,
        config.q,
        meta.window_seconds,
        meta.origin,
    )?;
    let ingestor = Ingestor::new(topology, salt, meta.window_seconds, meta.origin);

    let (notify_tx, notify_rx) = mpsc::unbounded_channel();
    let state = AppState::new(
        ServiceInner {
            store,
            broker,
            pipeline,
        },
        ingestor,
        notify_tx,
    );
    Ok(Service {
        state,
        notify_rx,
        meta,
        config,
    })
}
