//! Deterministic pedestrian-traffic simulator.
//!
//! Generates the three logs the service consumes and evaluates against:
//! raw probe reports, camera events at the choke point, and exact per-zone
//! ground truth. The generator is seeded and single-threaded, so identical
//! configurations produce byte-identical logs; that determinism is what the
//! end-to-end replay tests lean on.
//!
//! The traffic model is intentionally simple but reproduces the two failure
//! modes that motivate calibration: passers-by inside sniffer range inflate
//! device counts (overestimation), and short dwell times combined with long
//! probe intervals let pedestrians slip through uncounted (underestimation).

pub mod config;
pub mod generate;
pub mod presets;

pub use config::{
    IntervalShape, ProbeIntervalSpec, RegimeShift, ScenarioConfig, SimError, TransitSpeed,
    ZoneArrivalProfile,
};
pub use generate::{
    camera_observe, simulate, GroundTruthRecord, MemorySink, NdjsonDirSink, SimSink, SimSummary,
};
pub use presets::{preset, Preset};
