//! Scenario configuration and validation.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crowdcal_core::model::{validate_topology, ValidatedTopology, ZoneTopology};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("simulation output error: {0}")]
    Io(#[from] std::io::Error),
    #[error("simulation output error: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Shape of the inter-probe gap distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalShape {
    Uniform,
    /// Uniform in log space, biasing toward short gaps.
    LogUniform,
}

/// Distribution of the gap between consecutive probe emissions of one
/// device. Real devices probe anywhere from a few seconds to two minutes
/// apart, so the default is uniform over [2, 120] seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeIntervalSpec {
    pub min_s: f64,
    pub max_s: f64,
    pub shape: IntervalShape,
}

impl Default for ProbeIntervalSpec {
    fn default() -> Self {
        ProbeIntervalSpec {
            min_s: 2.0,
            max_s: 120.0,
            shape: IntervalShape::Uniform,
        }
    }
}

/// How long entering pedestrians stay inside a zone's sniffer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitSpeed {
    /// Browsing traffic, dwell uniform in [60, 300] s.
    Stroll,
    /// Through traffic, dwell uniform in [10, 30] s. Short enough that many
    /// devices never probe while in range.
    Commute,
}

impl TransitSpeed {
    pub(crate) fn dwell_bounds_s(self) -> (f64, f64) {
        match self {
            TransitSpeed::Stroll => (60.0, 300.0),
            TransitSpeed::Commute => (10.0, 30.0),
        }
    }
}

/// Mean pedestrian arrivals per window for each hour of the day, per zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneArrivalProfile {
    pub zone_id: String,
    pub hourly_mean: [f64; 24],
}

/// A step change applied from a given simulation hour onward: the share of
/// pedestrians carrying an active device drops or rises, which shifts the
/// device-to-people ratio the calibrator must relearn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeShift {
    pub at_hour: u32,
    pub device_carry_rate: f64,
}

/// Complete description of one simulated deployment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Simulation start, which is also the window epoch origin.
    #[serde(with = "crowdcal_core::model::timefmt")]
    pub origin: DateTime<Utc>,
    pub duration_hours: u32,
    pub window_seconds: u32,
    pub topology: ZoneTopology,
    pub arrival_profiles: Vec<ZoneArrivalProfile>,
    /// Multiplier applied to arrival means on Saturdays and Sundays.
    pub weekend_factor: f64,
    pub probe_interval: ProbeIntervalSpec,
    pub device_carry_rate: f64,
    /// Mean non-entering passers-by per zone per window. They linger inside
    /// sniffer range without ever counting as passages.
    pub passerby_rate: f64,
    pub transit_speed: TransitSpeed,
    pub camera_accuracy: f64,
    /// Mean spurious camera events per window at the choke point.
    pub camera_false_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime_shift: Option<RegimeShift>,
}

impl ScenarioConfig {
    /// Number of tumbling windows the run spans.
    pub fn window_count(&self) -> u64 {
        (self.duration_hours as u64 * 3600) / self.window_seconds as u64
    }

    /// Device carry rate in force during a given simulation hour.
    pub fn carry_rate_at_hour(&self, sim_hour: u64) -> f64 {
        match self.regime_shift {
            Some(shift) if sim_hour >= shift.at_hour as u64 => shift.device_carry_rate,
            _ => self.device_carry_rate,
        }
    }

    /// Checks every config invariant and returns the validated topology.
    /// All problems are reported at once.
    pub fn validate(&self) -> Result<ValidatedTopology, SimError> {
        let mut problems = Vec::new();

        if self.duration_hours == 0 {
            problems.push("duration_hours must be positive".to_string());
        }
        if self.window_seconds == 0 {
            problems.push("window_seconds must be positive".to_string());
        } else if !(self.duration_hours as u64 * 3600).is_multiple_of(self.window_seconds as u64) {
            problems.push(format!(
                "window_seconds {} does not evenly divide the {} hour duration",
                self.window_seconds, self.duration_hours
            ));
        }
        if !(0.0..=1.0).contains(&self.device_carry_rate) {
            problems.push(format!(
                "device_carry_rate {} outside [0, 1]",
                self.device_carry_rate
            ));
        }
        if !(self.camera_accuracy > 0.0 && self.camera_accuracy <= 1.0) {
            problems.push(format!(
                "camera_accuracy {} outside (0, 1]",
                self.camera_accuracy
            ));
        }
        for (name, value) in [
            ("passerby_rate", self.passerby_rate),
            ("camera_false_rate", self.camera_false_rate),
            ("weekend_factor", self.weekend_factor),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                problems.push(format!("{name} {value} must be finite and non-negative"));
            }
        }
        if !(self.probe_interval.min_s > 0.0
            && self.probe_interval.max_s >= self.probe_interval.min_s
            && self.probe_interval.max_s.is_finite())
        {
            problems.push(format!(
                "probe_interval [{}, {}] must satisfy 0 < min <= max",
                self.probe_interval.min_s, self.probe_interval.max_s
            ));
        }
        if let Some(shift) = self.regime_shift {
            if !(0.0..=1.0).contains(&shift.device_carry_rate) {
                problems.push(format!(
                    "regime_shift device_carry_rate {} outside [0, 1]",
                    shift.device_carry_rate
                ));
            }
        }

        let validated = match validate_topology(self.topology.clone()) {
            Ok(v) => Some(v),
            Err(errs) => {
                problems.push(errs.to_string());
                None
            }
        };

        for zone in &self.topology.zones {
            match self
                .arrival_profiles
                .iter()
                .filter(|p| p.zone_id == zone.zone_id)
                .count()
            {
                1 => {}
                0 => problems.push(format!("zone {} has no arrival profile", zone.zone_id)),
                _ => problems.push(format!(
                    "zone {} has multiple arrival profiles",
                    zone.zone_id
                )),
            }
        }
        for profile in &self.arrival_profiles {
            if !self
                .topology
                .zones
                .iter()
                .any(|z| z.zone_id == profile.zone_id)
            {
                problems.push(format!(
                    "arrival profile references unknown zone {}",
                    profile.zone_id
                ));
            }
            if profile
                .hourly_mean
                .iter()
                .any(|m| !(m.is_finite() && *m >= 0.0))
            {
                problems.push(format!(
                    "zone {} arrival profile has a negative or non-finite mean",
                    profile.zone_id
                ));
            }
        }

        match validated {
            Some(v) if problems.is_empty() => Ok(v),
            _ => Err(SimError::InvalidConfig(problems)),
        }
    }
}
