//! Accuracy metrics computed from an estimate series and a truth series.

use super::estimators::Estimate;
use crate::simulator::TruthSample;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochError {
    pub t: f64,
    /// meters
    pub position: f64,
    /// signed, meters
    pub vertical: f64,
    /// degrees
    pub orientation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse_3d: f64,
    pub rmse_vertical: f64,
    pub orientation_error_rms: f64,
    /// meters per minute
    pub drift_rate: f64,
    pub epochs: usize,
    pub errors: Vec<EpochError>,
}

/// Truth sample stamped `t`, or the nearest one when no exact match exists.
pub fn truth_at(truth: &[TruthSample], t: f64) -> Option<&TruthSample> {
    let k = truth.partition_point(|s| s.t < t);
    let candidates = [k.checked_sub(1), Some(k)];
    candidates
        .into_iter()
        .flatten()
        .filter_map(|i| truth.get(i))
        .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

pub fn compute(estimates: &[Estimate], truth: &[TruthSample]) -> Metrics {
    let errors: Vec<EpochError> = estimates
        .iter()
        .filter_map(|e| {
            let gt = truth_at(truth, e.t)?;
            let d = e.state.position() - gt.pose.translation;
            Some(EpochError {
                t: e.t,
                position: d.norm(),
                vertical: d.z,
                orientation: e.state.rotation().angle_to(&gt.pose.rotation).to_degrees(),
            })
        })
        .collect();
    let t: Vec<f64> = errors.iter().map(|e| e.t).collect();
    let pos: Vec<f64> = errors.iter().map(|e| e.position).collect();
    Metrics {
        rmse_3d: rms(pos.iter().copied()),
        rmse_vertical: rms(errors.iter().map(|e| e.vertical)),
        orientation_error_rms: rms(errors.iter().map(|e| e.orientation)),
        drift_rate: slope(&t, &pos) * 60.0,
        epochs: errors.len(),
        errors,
    }
}

/// Mean and 95th percentile (nearest rank), in milliseconds.
pub fn timing_summary(seconds: &[f64]) -> (f64, f64) {
    if seconds.is_empty() {
        return (0.0, 0.0);
    }
    let mut ms: Vec<f64> = seconds.iter().map(|s| s * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    let rank = ((0.95 * ms.len() as f64).ceil() as usize).clamp(1, ms.len());
    (mean, ms[rank - 1])
}
