//! Crowd calibration: reconciling Wi-Fi device counts with camera counts.
//!
//! Probe-based device counts systematically misestimate true crowd size
//! (sensing range, probe cadence and device ownership all distort them), but
//! the error is close to proportional across nearby zones. Both algorithms
//! therefore learn a single multiplicative coefficient `a` at the camera
//! equipped choke point and apply it to every zone's device count:
//!
//! * proportional: each window, `a = y0 / d0`, the ratio of the camera count
//!   to the device count at the choke point;
//! * adaptive linear: a least-squares line through the origin over the `q`
//!   most recent choke observations, `a = sum(x*y) / sum(x^2)`.
//!
//! Degenerate windows (no devices at the choke point, or a training set with
//! zero spread) leave the previous coefficient in force. Until a first valid
//! coefficient exists the system publishes raw counts flagged as fallback
//! rather than inventing a scale.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{TimeWindow, WindowMeasurement};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("training window size q must be at least 1")]
    InvalidQ,
    #[error("zone {zone_id} reports window {got}, expected window {expected}")]
    WindowMismatch {
        zone_id: String,
        expected: u64,
        got: u64,
    },
    #[error("choke measurement for window {0} is missing its camera total")]
    MissingCameraTotal(u64),
    #[error("non-choke zone {zone_id} unexpectedly carries a camera total")]
    UnexpectedCameraTotal { zone_id: String },
}

/// Which coefficient update rule a [`CalibrationState`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Proportional,
    AdaptiveLinear,
}

/// One choke point observation used for training: `x` is the device count,
/// `y` the camera count of the same window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPoint {
    pub x: u64,
    pub y: u64,
    pub window_index: u64,
}

/// Per-window coefficient: camera count over device count. Undefined when
/// no devices were seen, in which case the caller keeps its previous value.
pub fn proportional_coefficient(d0: u64, y0: u64) -> Option<f64> {
    if d0 == 0 {
        return None;
    }
    Some(y0 as f64 / d0 as f64)
}

/// Least-squares slope of a line through the origin over the training set:
/// the unique minimizer of `sum((y - a*x)^2)`. Undefined when `sum(x^2)` is
/// zero (empty set, or every observation saw zero devices).
pub fn linear_coefficient(points: &[TrainingPoint]) -> Option<f64> {
    let mut sum_xy = 0.0;
    let mut sum_xx = 0.0;
    for p in points {
        sum_xy += p.x as f64 * p.y as f64;
        sum_xx += p.x as f64 * p.x as f64;
    }
    if sum_xx == 0.0 {
        return None;
    }
    Some(sum_xy / sum_xx)
}

/// Rolling calibration state. Construct a fresh one to switch algorithms;
/// nothing carries over between modes.
#[derive(Debug, Clone)]
pub struct CalibrationState {
    mode: Algorithm,
    q: usize,
    training: VecDeque<TrainingPoint>,
    coefficient: Option<f64>,
}

impl CalibrationState {
    pub fn new(mode: Algorithm, q: usize) -> Result<Self, CalibrationError> {
        if q == 0 {
            return Err(CalibrationError::InvalidQ);
        }
        Ok(CalibrationState {
            mode,
            q,
            training: VecDeque::new(),
            coefficient: None,
        })
    }

    pub fn proportional() -> Self {
        // q is unused by the proportional rule; 1 keeps the invariant q >= 1.
        CalibrationState::new(Algorithm::Proportional, 1).expect("q = 1 is valid")
    }

    pub fn adaptive_linear(q: usize) -> Result<Self, CalibrationError> {
        CalibrationState::new(Algorithm::AdaptiveLinear, q)
    }

    pub fn mode(&self) -> Algorithm {
        self.mode
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Latest valid coefficient, if any window has produced one yet.
    pub fn coefficient(&self) -> Option<f64> {
        self.coefficient
    }

    pub fn training_len(&self) -> usize {
        self.training.len()
    }
}

/// Calibrated estimate for one zone and window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneEstimate {
    pub zone_id: String,
    pub window: TimeWindow,
    pub raw_count: u64,
    /// `coefficient_used * raw_count`; equals `raw_count` on fallback.
    pub calibrated: f64,
    pub coefficient_used: f64,
    /// True while no valid coefficient exists yet and raw counts are served.
    pub fallback: bool,
}

/// Advances the calibration state by one finalized window and produces the
/// estimates for every zone, choke point first.
///
/// `choke` must carry the window's camera total and every measurement must
/// belong to the same window. The choke point zone is calibrated with the
/// same coefficient as everyone else, so its published estimate generally
/// differs from the raw camera count.
pub fn update_and_calibrate(
    state: &mut CalibrationState,
    choke: &WindowMeasurement,
    others: &[WindowMeasurement],
) -> Result<Vec<ZoneEstimate>, CalibrationError> {
    let window = choke.window;
    let y0 = choke
        .camera_total
        .ok_or(CalibrationError::MissingCameraTotal(window.index))?;
    let d0 = choke.device_count;
    for m in others {
        if m.window != window {
            return Err(CalibrationError::WindowMismatch {
                zone_id: m.zone_id.clone(),
                expected: window.index,
                got: m.window.index,
            });
        }
        if m.camera_total.is_some() {
            return Err(CalibrationError::UnexpectedCameraTotal {
                zone_id: m.zone_id.clone(),
            });
        }
    }

    match state.mode {
        Algorithm::Proportional => {
            if let Some(a) = proportional_coefficient(d0, y0) {
                state.coefficient = Some(a);
            }
        }
        Algorithm::AdaptiveLinear => {
            state.training.push_back(TrainingPoint {
                x: d0,
                y: y0,
                window_index: window.index,
            });
            if state.training.len() > state.q {
                state.training.pop_front();
            }
            if state.training.len() == state.q {
                let (slice_a, slice_b) = state.training.as_slices();
                let a = if slice_b.is_empty() {
                    linear_coefficient(slice_a)
                } else {
                    let points: Vec<TrainingPoint> = state.training.iter().copied().collect();
                    linear_coefficient(&points)
                };
                if let Some(a) = a {
                    state.coefficient = Some(a);
                }
            }
        }
    }

    let estimates = std::iter::once(choke)
        .chain(others.iter())
        .map(|m| match state.coefficient {
            Some(a) => ZoneEstimate {
                zone_id: m.zone_id.clone(),
                window,
                raw_count: m.device_count,
                calibrated: a * m.device_count as f64,
                coefficient_used: a,
                fallback: false,
            },
            None => ZoneEstimate {
                zone_id: m.zone_id.clone(),
                window,
                raw_count: m.device_count,
                calibrated: m.device_count as f64,
                coefficient_used: 1.0,
                fallback: true,
            },
        })
        .collect();
    Ok(estimates)
}
