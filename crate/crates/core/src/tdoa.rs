//! UWB-TDoA and ultrasonic position solving.
//!
//! Three pieces: the range-difference residual, a closed-form spherical
//! intersection for absolute ranges, and iteratively reweighted Gauss-Newton
//! with a Huber penalty for the range differences. Ultrasonic ranges seed the
//! TDoA refinement.

use crate::error::{FusionError, Result};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Speed of light, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Largest accepted condition number of the normal matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Weight of the caller's prior when fewer than four ultrasonic ranges exist, meters (1 sigma).
pub const ULTRASONIC_PRIOR_SIGMA: f64 = 1.0;

pub type AnchorId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub ids: Vec<AnchorId>,
    pub positions: Vec<Vector3<f64>>,
    pub reference_id: AnchorId,
}

impl AnchorSet {
    pub fn new(
        ids: Vec<AnchorId>,
        positions: Vec<Vector3<f64>>,
        reference_id: AnchorId,
    ) -> Result<Self> {
        if ids.len() != positions.len() {
            return Err(FusionError::DimensionMismatch(format!(
                "{} anchor ids for {} positions",
                ids.len(),
                positions.len()
            )));
        }
        for (k, id) in ids.iter().enumerate() {
            if ids[..k].contains(id) {
                return Err(FusionError::Scenario(format!("duplicate anchor id {id}")));
            }
        }
        let set = Self {
            ids,
            positions,
            reference_id,
        };
        if !set.positions.is_empty() {
            set.position(reference_id)?;
        }
        Ok(set)
    }

    /// Anchors numbered `0..n`, the first one as reference.
    pub fn from_positions(positions: Vec<Vector3<f64>>) -> Self {
        let ids = (0..positions.len() as AnchorId).collect();
        Self {
            ids,
            positions,
            reference_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: AnchorId) -> Result<Vector3<f64>> {
        self.ids
            .iter()
            .position(|&a| a == id)
            .map(|k| self.positions[k])
            .ok_or(FusionError::UnknownAnchor(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (AnchorId, &Vector3<f64>)> {
        self.ids.iter().copied().zip(self.positions.iter())
    }

    /// Checks that the anchors span 3D: at least four, not all coplanar.
    pub fn check_spans_3d(&self) -> Result<()> {
        if self.len() < 4 {
            return Err(FusionError::DegenerateGeometry(format!(
                "{} anchors, need at least 4",
                self.len()
            )));
        }
        let origin = self.positions[0];
        let rows: Vec<_> = self.positions[1..].iter().map(|p| p - origin).collect();
        let m = DMatrix::from_fn(rows.len(), 3, |r, c| rows[r][c]);
        let sv = m.singular_values();
        let max = sv.max();
        if max == 0.0 || sv.min() / max < 1e-9 {
            return Err(FusionError::DegenerateGeometry(
                "anchors are coplanar".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdoaMeasurement {
    pub t: f64,
    pub anchor_i: AnchorId,
    pub anchor_j: AnchorId,
    /// Range difference `|p - a_i| - |p - a_j|`, meters.
    pub delta_d: f64,
    /// 1-sigma, meters.
    pub sigma: f64,
}

impl TdoaMeasurement {
    /// Range difference from a measured arrival-time difference.
    pub fn from_time_difference(
        t: f64,
        anchor_i: AnchorId,
        anchor_j: AnchorId,
        delta_t: f64,
        sigma: f64,
    ) -> Self {
        Self {
            t,
            anchor_i,
            anchor_j,
            delta_d: SPEED_OF_LIGHT * delta_t,
            sigma,
        }
    }

    /// `|delta_d| <= |a_i - a_j| + 3 sigma`.
    pub fn is_feasible(&self, anchors: &AnchorSet) -> Result<bool> {
        let baseline = (anchors.position(self.anchor_i)? - anchors.position(self.anchor_j)?).norm();
        Ok(self.delta_d.abs() <= baseline + 3.0 * self.sigma)
    }

    pub fn swapped(&self) -> Self {
        Self {
            anchor_i: self.anchor_j,
            anchor_j: self.anchor_i,
            delta_d: -self.delta_d,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UltrasonicRange {
    pub t: f64,
    pub anchor_id: AnchorId,
    pub range: f64,
    pub sigma: f64,
}

/// `|p - a_i| - |p - a_j| - delta_d`, given anchor positions.
pub fn range_difference_residual(
    p: &Vector3<f64>,
    a_i: &Vector3<f64>,
    a_j: &Vector3<f64>,
    delta_d: f64,
) -> f64 {
    (p - a_i).norm() - (p - a_j).norm() - delta_d
}

/// Hessian of `|p - a|`; zero at the anchor itself.
fn range_hessian(p: &Vector3<f64>, a: &Vector3<f64>) -> Matrix3<f64> {
    let d = p - a;
    let n = d.norm();
    if n > 0.0 {
        let u = d / n;
        (Matrix3::identity() - u * u.transpose()) / n
    } else {
        Matrix3::zeros()
    }
}

/// Gradient of `|p - a|`; zero at the anchor itself.
pub fn range_gradient(p: &Vector3<f64>, a: &Vector3<f64>) -> Vector3<f64> {
    let d = p - a;
    let n = d.norm();
    if n > 0.0 {
        d / n
    } else {
        Vector3::zeros()
    }
}

pub fn tdoa_residual(p: &Vector3<f64>, m: &TdoaMeasurement, anchors: &AnchorSet) -> Result<f64> {
    let a_i = anchors.position(m.anchor_i)?;
    let a_j = anchors.position(m.anchor_j)?;
    Ok(range_difference_residual(p, &a_i, &a_j, m.delta_d))
}

/// Linearized sphere-difference least squares against the reference anchor.
///
/// The reference is `anchors.reference_id` when it has a range, otherwise the
/// first range in the list.
pub fn spherical_intersection(
    ranges: &[(AnchorId, f64)],
    anchors: &AnchorSet,
) -> Result<Vector3<f64>> {
    if ranges.len() < 4 {
        return Err(FusionError::InsufficientConstraints(format!(
            "{} ranges, need at least 4",
            ranges.len()
        )));
    }
    let ref_k = ranges
        .iter()
        .position(|(id, _)| *id == anchors.reference_id)
        .unwrap_or(0);
    let (ref_id, d_i) = ranges[ref_k];
    let a_i = anchors.position(ref_id)?;
    let mut a = DMatrix::zeros(ranges.len() - 1, 3);
    let mut b = DVector::zeros(ranges.len() - 1);
    let mut row = 0;
    for (k, &(id, d_j)) in ranges.iter().enumerate() {
        if k == ref_k {
            continue;
        }
        let a_j = anchors.position(id)?;
        let diff = 2.0 * (a_j - a_i);
        a.set_row(row, &diff.transpose());
        b[row] = d_i * d_i - d_j * d_j + a_j.norm_squared() - a_i.norm_squared();
        row += 1;
    }
    let ata = a.transpose() * &a;
    check_conditioning(&ata)?;
    let atb = a.transpose() * b;
    let chol = ata
        .cholesky()
        .ok_or_else(|| FusionError::DegenerateGeometry("normal matrix not PD".into()))?;
    let p = chol.solve(&atb);
    Ok(Vector3::new(p[0], p[1], p[2]))
}

fn check_conditioning(m: &DMatrix<f64>) -> Result<()> {
    let eig = m.clone().symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(FusionError::DegenerateGeometry(format!(
            "condition number {:e}",
            if min > 0.0 { max / min } else { f64::INFINITY }
        )));
    }
    Ok(())
}

/// Gauss-Newton fit of `sum (|p - a_k| - d_k)^2 / sigma_k^2`.
///
/// With fewer than four ranges the problem is regularized toward `prior`
/// (1 m, 1 sigma). The prior also serves as the starting point; without one,
/// the start comes from the spherical intersection of the ranges.
pub fn ultrasonic_init(
    ranges: &[UltrasonicRange],
    anchors: &AnchorSet,
    prior: Option<&Vector3<f64>>,
) -> Result<Vector3<f64>> {
    let regularize = ranges.len() < 4;
    if regularize && prior.is_none() {
        return Err(FusionError::InsufficientConstraints(format!(
            "{} ultrasonic ranges and no prior",
            ranges.len()
        )));
    }
    let located: Vec<(Vector3<f64>, &UltrasonicRange)> = ranges
        .iter()
        .map(|r| anchors.position(r.anchor_id).map(|a| (a, r)))
        .collect::<Result<_>>()?;
    if ranges.is_empty() {
        return Ok(*prior.expect("checked above"));
    }
    let mut p = match prior {
        Some(p) => *p,
        None => {
            let pairs: Vec<_> = ranges.iter().map(|r| (r.anchor_id, r.range)).collect();
            spherical_intersection(&pairs, anchors).unwrap_or_else(|_| {
                located.iter().map(|(a, _)| a).sum::<Vector3<f64>>() / located.len() as f64
            })
        }
    };
    for _ in 0..20 {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for (a, r) in &located {
            let w = 1.0 / (r.sigma * r.sigma).max(1e-12);
            let res = (p - a).norm() - r.range;
            let j = range_gradient(&p, a);
            h += w * j * j.transpose();
            g += w * j * res;
        }
        if regularize {
            let w = 1.0 / (ULTRASONIC_PRIOR_SIGMA * ULTRASONIC_PRIOR_SIGMA);
            h += Matrix3::identity() * w;
            g += (p - prior.expect("checked above")) * w;
        }
        let step = match h.cholesky() {
            Some(c) => -c.solve(&g),
            None => {
                return Err(FusionError::DegenerateGeometry(
                    "ultrasonic normal matrix singular".into(),
                ))
            }
        };
        p += step;
        if step.norm() < 1e-9 {
            break;
        }
    }
    Ok(p)
}

/// Huber penalty: `r^2/2` inside `delta`, `delta |r| - delta^2/2` outside.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * a - 0.5 * delta * delta
    }
}

/// Derivative of [`huber`].
pub fn huber_derivative(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

/// IRLS weight `rho'(r) / r`.
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustSolution {
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub iterations: usize,
}

/// Huber-weighted Gauss-Newton on range differences from `init`.
///
/// `delta` is in meters and applies to the raw residuals; the per-measurement
/// sigma scales the information. Pass `f64::INFINITY` for plain least squares.
pub fn robust_solve(
    tdoas: &[TdoaMeasurement],
    init: &Vector3<f64>,
    anchors: &AnchorSet,
    delta: f64,
) -> Result<RobustSolution> {
    const MAX_ITERATIONS: usize = 50;
    const STEP_TOL: f64 = 1e-10;
    if tdoas.len() < 3 {
        return Err(FusionError::InsufficientConstraints(format!(
            "{} range differences, need at least 3",
            tdoas.len()
        )));
    }
    let located: Vec<_> = tdoas
        .iter()
        .map(|m| Ok((anchors.position(m.anchor_i)?, anchors.position(m.anchor_j)?, m)))
        .collect::<Result<_>>()?;

    let cost = |p: &Vector3<f64>| -> f64 {
        located
            .iter()
            .map(|(ai, aj, m)| {
                let r = range_difference_residual(p, ai, aj, m.delta_d);
                huber(r, delta) / (m.sigma * m.sigma)
            })
            .sum()
    };
    // IRLS normal matrix, Gauss-Newton matrix over the inliers, full Hessian
    // and gradient of the robust cost.
    let normal = |p: &Vector3<f64>| {
        let mut h_irls = Matrix3::zeros();
        let mut h_exact = Matrix3::zeros();
        let mut h_full = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for (ai, aj, m) in &located {
            let r = range_difference_residual(p, ai, aj, m.delta_d);
            let j = range_gradient(p, ai) - range_gradient(p, aj);
            let info = 1.0 / (m.sigma * m.sigma);
            let jj = j * j.transpose();
            h_irls += jj * (huber_weight(r, delta) * info);
            if r.abs() <= delta {
                h_exact += jj * info;
            }
            let slope = huber_derivative(r, delta) * info;
            g += j * slope;
            h_full += (range_hessian(p, ai) - range_hessian(p, aj)) * slope;
        }
        h_full += h_exact;
        (h_irls, h_exact, h_full, g)
    };

    // Backtracks while the cost rises beyond rounding noise; when the full
    // step already helps, keeps extending it along the same direction.
    let line_search = |p: &Vector3<f64>, step: &Vector3<f64>, current: f64| -> (f64, f64) {
        let slack = 1e-12 * current.abs();
        let mut scale = 1.0;
        let mut c = cost(&(p + step));
        while c > current + slack && scale > 1e-6 {
            scale *= 0.5;
            c = cost(&(p + step * scale));
        }
        if scale == 1.0 {
            while scale < 1024.0 {
                let longer = cost(&(p + step * (2.0 * scale)));
                if longer >= c {
                    break;
                }
                scale *= 2.0;
                c = longer;
            }
        }
        (scale, c)
    };

    let mut p = *init;
    let mut current = cost(&p);
    for it in 1..=MAX_ITERATIONS {
        let (h_irls, h_exact, h_full, g) = normal(&p);
        check_conditioning(&DMatrix::from_column_slice(3, 3, h_irls.as_slice()))?;
        let solve = |h: &Matrix3<f64>| h.cholesky().map(|c| -c.solve(&g));
        let irls_step = solve(&h_irls)
            .ok_or_else(|| FusionError::DegenerateGeometry("normal matrix not PD".into()))?;
        // Reweighting alone converges linearly along poorly observed axes and
        // with large residuals; the curvature-based steps are quadratic near
        // the optimum but can oscillate when a residual sits on the kink or be
        // indefinite far from it. Take whichever lowers the cost most.
        let mut best = (irls_step, line_search(&p, &irls_step, current));
        for h in [h_exact, h_full] {
            let eig = h.symmetric_eigenvalues();
            if !(eig.min() > 0.0 && eig.max() / eig.min() < 1e8) {
                continue;
            }
            if let Some(step) = solve(&h) {
                let trial = line_search(&p, &step, current);
                if trial.1 < best.1 .1 {
                    best = (step, trial);
                }
            }
        }
        let (step, (scale, candidate_cost)) = best;
        let slack = 1e-12 * current.abs();
        let previous = current;
        if candidate_cost <= current + slack {
            p += step * scale;
            current = candidate_cost.min(current);
        }
        let moved = step.norm() * scale;
        let stalled = previous - current <= slack;
        if moved < STEP_TOL || (stalled && moved < 1e-9) {
            return Ok(RobustSolution {
                position: p,
                covariance: covariance_at(&normal(&p).0),
                iterations: it,
            });
        }
    }
    Err(FusionError::NoConvergence {
        iterations: MAX_ITERATIONS,
        estimate: p,
        covariance: covariance_at(&normal(&p).0),
    })
}

fn covariance_at(h: &Matrix3<f64>) -> Matrix3<f64> {
    h.try_inverse()
        .unwrap_or_else(|| Matrix3::from_diagonal_element(f64::INFINITY))
}

/// Range differences of `p` against the reference anchor for every other anchor.
pub fn forward_tdoas(p: &Vector3<f64>, anchors: &AnchorSet, sigma: f64) -> Vec<TdoaMeasurement> {
    let a_ref = anchors
        .position(anchors.reference_id)
        .expect("reference anchor present");
    anchors
        .iter()
        .filter(|(id, _)| *id != anchors.reference_id)
        .map(|(id, a)| TdoaMeasurement {
            t: 0.0,
            anchor_i: id,
            anchor_j: anchors.reference_id,
            delta_d: (p - a).norm() - (p - a_ref).norm(),
            sigma,
        })
        .collect()
}
