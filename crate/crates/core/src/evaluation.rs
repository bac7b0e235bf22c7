//! Accuracy metrics for comparing estimate series against ground truth.
//!
//! All metrics pair element `i` of the estimate series with element `i` of
//! the truth series; series must be equally long, aligned by window, and
//! non-empty. Errors are signed (`estimate - truth`), so a positive mean
//! error is overestimation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("estimate series has {estimates} entries but truth has {truth}")]
    LengthMismatch { estimates: usize, truth: usize },
    #[error("cannot evaluate an empty series")]
    EmptySeries,
    #[error("ground truth is constant, normalized error is undefined")]
    ConstantTruth,
    #[error("baseline mean error is zero, improvement ratio is undefined")]
    UndefinedImprovement,
}

/// Distribution of signed errors. Quartiles use linear interpolation between
/// order statistics (the same convention as numpy's default percentile), and
/// `std_dev` is the population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Full evaluation of one estimate series against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_windows: usize,
    pub rmse: f64,
    pub nrmse: f64,
    pub error_stats: ErrorStats,
}

fn check_lengths(estimates: &[f64], truth: &[f64]) -> Result<(), EvalError> {
    if estimates.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            estimates: estimates.len(),
            truth: truth.len(),
        });
    }
    if estimates.is_empty() {
        return Err(EvalError::EmptySeries);
    }
    Ok(())
}

/// Root mean squared error over aligned series.
pub fn rmse(estimates: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    check_lengths(estimates, truth)?;
    let sum_sq: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, g)| (e - g) * (e - g))
        .sum();
    Ok((sum_sq / estimates.len() as f64).sqrt())
}

/// RMSE normalized by the range of the ground truth, so series with
/// different crowd scales become comparable. Undefined for constant truth.
pub fn nrmse(estimates: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    let r = rmse(estimates, truth)?;
    let max = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = truth.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return Err(EvalError::ConstantTruth);
    }
    Ok(r / (max - min))
}

/// Quantile by linear interpolation between closest ranks: rank `(n-1)*p`
/// split into its integer and fractional parts. `sorted` must be ascending.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Signed error distribution of an estimate series.
pub fn error_statistics(estimates: &[f64], truth: &[f64]) -> Result<ErrorStats, EvalError> {
    check_lengths(estimates, truth)?;
    let mut errors: Vec<f64> = estimates.iter().zip(truth).map(|(e, g)| e - g).collect();
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let variance = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    errors.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    Ok(ErrorStats {
        mean,
        std_dev: variance.sqrt(),
        min: errors[0],
        q1: quantile_sorted(&errors, 0.25),
        median: quantile_sorted(&errors, 0.5),
        q3: quantile_sorted(&errors, 0.75),
        max: errors[errors.len() - 1],
    })
}

/// Fraction of the baseline's mean absolute error removed by calibration:
/// `1 - |calibrated mean error| / |baseline mean error|`. Positive means
/// the calibrated series is closer to truth on average.
pub fn improvement_ratio(
    baseline: &EvaluationReport,
    calibrated: &EvaluationReport,
) -> Result<f64, EvalError> {
    if baseline.error_stats.mean == 0.0 {
        return Err(EvalError::UndefinedImprovement);
    }
    Ok(1.0 - calibrated.error_stats.mean.abs() / baseline.error_stats.mean.abs())
}

/// Composes all metrics for one series pair.
pub fn evaluate(estimates: &[f64], truth: &[f64]) -> Result<EvaluationReport, EvalError> {
    Ok(EvaluationReport {
        n_windows: estimates.len(),
        rmse: rmse(estimates, truth)?,
        nrmse: nrmse(estimates, truth)?,
        error_stats: error_statistics(estimates, truth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_matches_hand_computation() {
        // Errors 2 and 3: mean square 6.5.
        let r = rmse(&[3.0, 5.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r, 6.5f64.sqrt());
        assert_eq!(r, 2.5495097567963922);
    }

    #[test]
    fn rmse_is_zero_only_for_perfect_estimates() {
        assert_eq!(rmse(&[4.0, 7.0], &[4.0, 7.0]).unwrap(), 0.0);
        assert!(rmse(&[4.0, 7.1], &[4.0, 7.0]).unwrap() > 0.0);
    }

    #[test]
    fn nrmse_divides_by_truth_range() {
        let r = nrmse(&[3.0, 5.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r, 6.5f64.sqrt() / 1.0);
        let r2 = nrmse(&[12.0, 28.0], &[10.0, 30.0]).unwrap();
        assert_eq!(r2, 2.0 / 20.0);
        assert_eq!(
            nrmse(&[1.0, 2.0], &[5.0, 5.0]).unwrap_err(),
            EvalError::ConstantTruth
        );
    }

    #[test]
    fn quartiles_interpolate_between_order_statistics() {
        // Truth of zeros turns estimates into their own errors.
        let zeros = vec![0.0; 4];
        let stats = error_statistics(&[1.0, 2.0, 3.0, 4.0], &zeros).unwrap();
        assert_eq!(stats.q1, 1.75);
        assert_eq!(stats.median, 2.5);
        assert_eq!(stats.q3, 3.25);
        assert_eq!(stats.min, 1.0);
        assert_eq!(stats.max, 4.0);
    }

    #[test]
    fn error_stats_match_external_reference() {
        // Reference values computed with numpy: percentile(e, [25,50,75])
        // and std(e) for e = [-5,-2,0,1,7,9].
        let estimates = [-5.0, -2.0, 0.0, 1.0, 7.0, 9.0];
        let truth = vec![0.0; 6];
        let stats = error_statistics(&estimates, &truth).unwrap();
        assert_eq!(stats.q1, -1.5);
        assert_eq!(stats.median, 0.5);
        assert_eq!(stats.q3, 5.5);
        assert!((stats.std_dev - 4.8876260995383936).abs() < 1e-12);

        // Unsorted input, odd length.
        let stats2 = error_statistics(&[4.0, -1.0, 3.0, 8.0, 2.0], &[0.0; 5]).unwrap();
        assert_eq!(stats2.q1, 2.0);
        assert_eq!(stats2.median, 3.0);
        assert_eq!(stats2.q3, 4.0);
    }

    #[test]
    fn single_sample_stats_collapse_to_that_sample() {
        let stats = error_statistics(&[7.0], &[4.0]).unwrap();
        assert_eq!(stats.mean, 3.0);
        assert_eq!(stats.std_dev, 0.0);
        assert_eq!(stats.min, 3.0);
        assert_eq!(stats.q1, 3.0);
        assert_eq!(stats.median, 3.0);
        assert_eq!(stats.q3, 3.0);
        assert_eq!(stats.max, 3.0);
    }

    fn report_with_mean(mean: f64) -> EvaluationReport {
        EvaluationReport {
            n_windows: 1,
            rmse: mean.abs(),
            nrmse: 0.1,
            error_stats: ErrorStats {
                mean,
                std_dev: 0.0,
                min: mean,
                q1: mean,
                median: mean,
                q3: mean,
                max: mean,
            },
        }
    }

    #[test]
    fn improvement_ratio_compares_mean_error_magnitudes() {
        let ratio = improvement_ratio(&report_with_mean(1303.0), &report_with_mean(659.0)).unwrap();
        assert_eq!(ratio, 1.0 - 659.0 / 1303.0);
        assert!((ratio - 0.4942440521872602).abs() < 1e-15);

        // Sign of the mean error does not matter, only its magnitude.
        let ratio_neg =
            improvement_ratio(&report_with_mean(-1303.0), &report_with_mean(659.0)).unwrap();
        assert_eq!(ratio, ratio_neg);

        // A calibration that makes things worse goes negative.
        assert!(
            improvement_ratio(&report_with_mean(100.0), &report_with_mean(150.0)).unwrap() < 0.0
        );

        assert_eq!(
            improvement_ratio(&report_with_mean(0.0), &report_with_mean(1.0)).unwrap_err(),
            EvalError::UndefinedImprovement
        );
    }

    #[test]
    fn misaligned_or_empty_series_are_rejected() {
        assert_eq!(
            rmse(&[1.0], &[1.0, 2.0]).unwrap_err(),
            EvalError::LengthMismatch {
                estimates: 1,
                truth: 2
            }
        );
        assert_eq!(rmse(&[], &[]).unwrap_err(), EvalError::EmptySeries);
        assert_eq!(
            error_statistics(&[], &[]).unwrap_err(),
            EvalError::EmptySeries
        );
    }

    #[test]
    fn evaluate_composes_all_metrics() {
        let report = evaluate(&[3.0, 5.0], &[1.0, 2.0]).unwrap();
        assert_eq!(report.n_windows, 2);
        assert_eq!(report.rmse, 6.5f64.sqrt());
        assert_eq!(report.nrmse, 6.5f64.sqrt());
        assert_eq!(report.error_stats.mean, 2.5);
    }
}
