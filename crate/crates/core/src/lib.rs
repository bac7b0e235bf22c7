//! Core domain library for Wi-Fi based crowd estimation.
//!
//! The crate is deliberately free of I/O: it defines the shared vocabulary
//! (probe records, camera events, time windows, zone topology), the device
//! counting step, the two calibration algorithms that reconcile device counts
//! with camera-derived people counts at a choke point, and the evaluation
//! metrics used to compare estimates against ground truth.
//!
//! Everything here is deterministic and synchronous. Services and tools that
//! move bytes around live in the companion crates.

pub mod anonymize;
pub mod calibration;
pub mod counting;
pub mod evaluation;
pub mod model;

pub use anonymize::{anonymize, AnonymizeError, SaltConfig};
pub use calibration::{
    linear_coefficient, proportional_coefficient, update_and_calibrate, Algorithm,
    CalibrationError, CalibrationState, TrainingPoint, ZoneEstimate,
};
pub use counting::{camera_total, count_devices, CountingError, WindowProbeSet};
pub use evaluation::{
    error_statistics, evaluate, improvement_ratio, nrmse, rmse, ErrorStats, EvalError,
    EvaluationReport,
};
pub use model::{
    validate_topology, window_for, CameraEvent, DeviceId, Direction, GeoPoint, ModelError,
    ProbeRecord, RawProbeReport, TimeWindow, TopologyViolation, ValidatedTopology,
    WindowMeasurement, Zone, ZoneTopology,
};
