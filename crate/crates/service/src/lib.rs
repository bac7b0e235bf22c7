//! Ingestion, persistence, calibration pipeline, and the thin context
//! broker, plus the HTTP server that exposes them.
//!
//! Layering, bottom up:
//!
//! - [`store`]: append-only NDJSON logs with in-memory indexes; the only
//!   durable state. Reopening a directory rebuilds everything.
//! - [`ingest`]: validation and anonymization in front of the store; raw
//!   device addresses never get past this module.
//! - [`broker`]: NGSI-style latest-value map, history, subscriptions, and
//!   notification fan-out.
//! - [`pipeline`]: sequential window finalization (count, calibrate,
//!   persist, publish) and the deterministic offline replay runner.
//! - [`http`]: axum router, metrics, the notification delivery task, and
//!   the live finalizer loop.
//! - [`config`]: the service config file and assembly of the above.

pub mod broker;
pub mod config;
pub mod http;
pub mod ingest;
pub mod pipeline;
pub mod store;

pub use broker::{BrokerState, ContextEntity, EntityPattern, NotificationJob, Subscription};
pub use config::{build_service, resolve_timing, Service, ServiceConfig, StoreMeta};
pub use http::{
    router, run_finalizer, run_notifier, AppState, Metrics, NotifyPolicy, ServiceInner,
};
pub use ingest::{
    replay_camera_log, replay_probe_log, IngestError, IngestOutcome, Ingestor, ReplayError,
    ReplayMode, ReplayStats,
};
pub use pipeline::{
    run_replay, write_coefficients_csv, write_estimates_csv, FinalizedWindow, Pipeline,
    PipelineError, ReplayConfig, ReplayRunError, ReplaySummary,
};
pub use store::{FinalizationRecord, Store, StoreError};
