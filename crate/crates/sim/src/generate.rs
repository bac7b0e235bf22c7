//! The discrete-event generator.
//!
//! Time advances window by window. Each window draws one shared arrival
//! count per zone group (so zone series are correlated, not independent),
//! places every pedestrian's entry uniformly inside the window, and walks
//! each carried device's probe renewal process across its dwell interval.
//! All randomness flows through one seeded ChaCha stream consumed in a
//! fixed order, which makes the emitted logs a pure function of the config.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, Timelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crowdcal_core::model::{CameraEvent, Direction, RawProbeReport, TimeWindow, Zone};

use crate::config::{IntervalShape, ProbeIntervalSpec, ScenarioConfig, SimError};

/// Exact number of people who entered a zone during a window. This is what
/// estimates are ultimately judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub window: TimeWindow,
    pub zone_id: String,
    pub true_passages: u64,
}

/// Receiver for the three generated streams.
pub trait SimSink {
    fn probe(&mut self, record: &RawProbeReport) -> Result<(), SimError>;
    fn camera(&mut self, event: &CameraEvent) -> Result<(), SimError>;
    fn truth(&mut self, record: &GroundTruthRecord) -> Result<(), SimError>;
}

/// Collects everything in memory; used by tests and in-process pipelines.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub probes: Vec<RawProbeReport>,
    pub camera: Vec<CameraEvent>,
    pub truth: Vec<GroundTruthRecord>,
}

impl SimSink for MemorySink {
    fn probe(&mut self, record: &RawProbeReport) -> Result<(), SimError> {
        self.probes.push(record.clone());
        Ok(())
    }
    fn camera(&mut self, event: &CameraEvent) -> Result<(), SimError> {
        self.camera.push(event.clone());
        Ok(())
    }
    fn truth(&mut self, record: &GroundTruthRecord) -> Result<(), SimError> {
        self.truth.push(record.clone());
        Ok(())
    }
}

/// Streams the three logs as newline-delimited JSON files in one directory:
/// `probes.ndjson`, `camera.ndjson`, `truth.ndjson`.
pub struct NdjsonDirSink {
    probes: BufWriter<File>,
    camera: BufWriter<File>,
    truth: BufWriter<File>,
}

impl NdjsonDirSink {
    pub fn create(dir: &Path) -> Result<Self, SimError> {
        fs::create_dir_all(dir)?;
        let open = |name: &str| -> std::io::Result<BufWriter<File>> {
            Ok(BufWriter::new(File::create(dir.join(name))?))
        };
        Ok(NdjsonDirSink {
            probes: open("probes.ndjson")?,
            camera: open("camera.ndjson")?,
            truth: open("truth.ndjson")?,
        })
    }

    pub fn finish(mut self) -> Result<(), SimError> {
        self.probes.flush()?;
        self.camera.flush()?;
        self.truth.flush()?;
        Ok(())
    }
}

fn write_line<T: Serialize>(out: &mut BufWriter<File>, value: &T) -> Result<(), SimError> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

impl SimSink for NdjsonDirSink {
    fn probe(&mut self, record: &RawProbeReport) -> Result<(), SimError> {
        write_line(&mut self.probes, record)
    }
    fn camera(&mut self, event: &CameraEvent) -> Result<(), SimError> {
        write_line(&mut self.camera, event)
    }
    fn truth(&mut self, record: &GroundTruthRecord) -> Result<(), SimError> {
        write_line(&mut self.truth, record)
    }
}

/// Aggregate counters for one simulation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSummary {
    pub windows: u64,
    pub pedestrians: u64,
    pub passersby: u64,
    pub carried_devices: u64,
    pub probes: u64,
    pub camera_events: u64,
    pub true_passages_total: u64,
}

fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(mean)
        .expect("finite positive mean")
        .sample(rng);
    draw as u64
}

fn sample_binomial(rng: &mut ChaCha8Rng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p)
        .expect("probability in range")
        .sample(rng)
}

fn sample_interval_s(rng: &mut ChaCha8Rng, spec: &ProbeIntervalSpec) -> f64 {
    if spec.max_s <= spec.min_s {
        return spec.min_s;
    }
    match spec.shape {
        IntervalShape::Uniform => rng.random_range(spec.min_s..spec.max_s),
        IntervalShape::LogUniform => rng.random_range(spec.min_s.ln()..spec.max_s.ln()).exp(),
    }
}

/// Simulated devices get a fixed DA first octet. Sniffer hardware addresses
/// in topologies use the 02 locally-administered prefix instead, so no
/// observed-device address can ever legitimately appear in persisted state.
fn random_device_mac(rng: &mut ChaCha8Rng) -> String {
    let b: [u8; 5] = rng.random();
    format!(
        "DA:{:02X}:{:02X}:{:02X}:{:02X}:{:02X}",
        b[0], b[1], b[2], b[3], b[4]
    )
}

fn ms_to_datetime(ms: i64) -> DateTime<Utc> {
    DateTime::<Utc>::from_timestamp_millis(ms).expect("timestamp in range")
}

/// Applies the camera observation model to one window's worth of passages:
/// each passage is seen with probability `camera_accuracy`, and spurious
/// events arrive at `camera_false_rate` per window. The generator applies
/// the identical model per traversal while also placing events in time.
pub fn camera_observe(true_passages: u64, config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> u64 {
    let mut events = 0u64;
    for _ in 0..true_passages {
        if rng.random_bool(config.camera_accuracy) {
            events += 1;
        }
    }
    events + sample_poisson(rng, config.camera_false_rate)
}

struct DeviceProbeRun<'a> {
    sniffer_id: &'a str,
    entry_ms: i64,
    leave_ms: i64,
    sim_end_ms: i64,
}

fn emit_device_probes(
    rng: &mut ChaCha8Rng,
    config: &ScenarioConfig,
    run: DeviceProbeRun<'_>,
    out: &mut Vec<RawProbeReport>,
) {
    let mac = random_device_mac(rng);
    // Stationary start: the first probe lands a uniform fraction of one
    // full gap after entry, as if the device's probe clock were already
    // running when it walked into range.
    let first_gap_s = sample_interval_s(rng, &config.probe_interval);
    let mut t_ms =
        run.entry_ms + (first_gap_s * rng.random_range(0.0..1.0) * 1000.0).round() as i64;
    let mut sequence = 0u32;
    while t_ms < run.leave_ms && t_ms < run.sim_end_ms {
        out.push(RawProbeReport {
            mac: mac.clone(),
            sniffer_id: run.sniffer_id.to_string(),
            timestamp: ms_to_datetime(t_ms),
            sequence_number: sequence,
            rssi: None,
        });
        sequence += 1;
        let gap_ms = (sample_interval_s(rng, &config.probe_interval) * 1000.0).round() as i64;
        t_ms += gap_ms.max(1);
    }
}

/// Runs the scenario, streaming records into `sink`.
///
/// Per window the generator emits ground truth (zone order), then probes
/// sorted by timestamp, then camera events sorted by timestamp. Probes of a
/// pedestrian whose dwell crosses a window boundary keep their true
/// timestamps, so the probe log is grouped by generation window rather than
/// globally time-sorted; ingestion is order-independent by contract.
pub fn simulate(config: &ScenarioConfig, sink: &mut dyn SimSink) -> Result<SimSummary, SimError> {
    let topology = config.validate()?;
    let zones: Vec<&Zone> = topology.zones().iter().collect();
    let profiles: Vec<&[f64; 24]> = zones
        .iter()
        .map(|zone| {
            &config
                .arrival_profiles
                .iter()
                .find(|p| p.zone_id == zone.zone_id)
                .expect("validated profile")
                .hourly_mean
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let window_count = config.window_count();
    let window_ms = config.window_seconds as i64 * 1000;
    let sim_end_ms = config.origin.timestamp_millis() + window_count as i64 * window_ms;
    let mut summary = SimSummary {
        windows: window_count,
        ..SimSummary::default()
    };

    let mut probe_buf: Vec<RawProbeReport> = Vec::new();
    let mut camera_buf: Vec<CameraEvent> = Vec::new();

    for w in 0..window_count {
        let window = TimeWindow::from_index(w, config.window_seconds, config.origin)
            .expect("validated window duration");
        let window_start_ms = window.start.timestamp_millis();
        let hour_of_day = window.start.hour() as usize;
        let weekend = matches!(
            window.start.weekday(),
            chrono::Weekday::Sat | chrono::Weekday::Sun
        );
        let day_factor = if weekend { config.weekend_factor } else { 1.0 };
        let sim_hour = (w * config.window_seconds as u64) / 3600;
        let carry = config.carry_rate_at_hour(sim_hour);

        // One shared arrival draw keeps zone counts correlated: each zone's
        // count is a thinned copy of the same base process.
        let means: Vec<f64> = profiles
            .iter()
            .map(|p| p[hour_of_day] * day_factor)
            .collect();
        let base_mean = means.iter().copied().fold(0.0f64, f64::max);
        let base_count = sample_poisson(&mut rng, base_mean);

        probe_buf.clear();
        camera_buf.clear();
        let (dwell_lo_s, dwell_hi_s) = config.transit_speed.dwell_bounds_s();

        for (zone, mean) in zones.iter().zip(&means) {
            let passages = if base_mean > 0.0 {
                sample_binomial(&mut rng, base_count, mean / base_mean)
            } else {
                0
            };
            sink.truth(&GroundTruthRecord {
                window,
                zone_id: zone.zone_id.clone(),
                true_passages: passages,
            })?;
            summary.pedestrians += passages;
            summary.true_passages_total += passages;

            for _ in 0..passages {
                let entry_ms = window_start_ms + rng.random_range(0..window_ms);
                let dwell_ms =
                    rng.random_range((dwell_lo_s * 1000.0) as i64..=(dwell_hi_s * 1000.0) as i64);
                if zone.is_choke_point {
                    let direction = if rng.random_bool(0.5) {
                        Direction::MoveIn
                    } else {
                        Direction::MoveOut
                    };
                    if rng.random_bool(config.camera_accuracy) {
                        let camera_id =
                            zone.camera_ids[rng.random_range(0..zone.camera_ids.len())].clone();
                        camera_buf.push(CameraEvent {
                            camera_id,
                            direction,
                            timestamp: ms_to_datetime(entry_ms),
                            count: 1,
                        });
                    }
                }
                if carry > 0.0 && rng.random_bool(carry) {
                    summary.carried_devices += 1;
                    emit_device_probes(
                        &mut rng,
                        config,
                        DeviceProbeRun {
                            sniffer_id: &zone.sniffer_id,
                            entry_ms,
                            leave_ms: entry_ms + dwell_ms,
                            sim_end_ms,
                        },
                        &mut probe_buf,
                    );
                }
            }

            // Passers-by move along the zone's edge: inside sniffer range
            // long enough to probe, never through the counted area. Their
            // dwell ignores transit_speed because they are not transiting.
            let passersby = sample_poisson(&mut rng, config.passerby_rate);
            summary.passersby += passersby;
            for _ in 0..passersby {
                let entry_ms = window_start_ms + rng.random_range(0..window_ms);
                let dwell_ms = rng.random_range(60_000i64..=300_000);
                if carry > 0.0 && rng.random_bool(carry) {
                    summary.carried_devices += 1;
                    emit_device_probes(
                        &mut rng,
                        config,
                        DeviceProbeRun {
                            sniffer_id: &zone.sniffer_id,
                            entry_ms,
                            leave_ms: entry_ms + dwell_ms,
                            sim_end_ms,
                        },
                        &mut probe_buf,
                    );
                }
            }

            if zone.is_choke_point {
                let false_events = sample_poisson(&mut rng, config.camera_false_rate);
                for _ in 0..false_events {
                    let at_ms = window_start_ms + rng.random_range(0..window_ms);
                    let direction = if rng.random_bool(0.5) {
                        Direction::MoveIn
                    } else {
                        Direction::MoveOut
                    };
                    let camera_id =
                        zone.camera_ids[rng.random_range(0..zone.camera_ids.len())].clone();
                    camera_buf.push(CameraEvent {
                        camera_id,
                        direction,
                        timestamp: ms_to_datetime(at_ms),
                        count: 1,
                    });
                }
            }
        }

        probe_buf.sort_by(|a, b| {
            (a.timestamp, &a.mac, a.sequence_number).cmp(&(b.timestamp, &b.mac, b.sequence_number))
        });
        camera_buf.sort_by(|a, b| {
            let da = matches!(a.direction, Direction::MoveOut) as u8;
            let db = matches!(b.direction, Direction::MoveOut) as u8;
            (a.timestamp, &a.camera_id, da).cmp(&(b.timestamp, &b.camera_id, db))
        });
        for record in &probe_buf {
            sink.probe(record)?;
        }
        for event in &camera_buf {
            sink.camera(event)?;
        }
        summary.probes += probe_buf.len() as u64;
        summary.camera_events += camera_buf.len() as u64;
    }

    Ok(summary)
}
