//! Factor types shared by the smoother and the filter baseline.
//!
//! Every Jacobian is taken with respect to the 15-dim right-perturbation
//! tangent of a connected [`NavState`] (see [`NavState::retract`]).

use crate::error::{FusionError, Result};
use crate::preintegration::{
    residual_and_jacobians, tangent, NavState, PreintegratedImu,
};
use crate::tdoa::{huber, huber_weight, range_gradient};
use nalgebra::{DMatrix, DVector, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FactorKind {
    ImuPreint,
    Tdoa,
    UltrasonicRange,
    Elevation,
    Prior,
}

/// Height of the tag above a reference point along `normal`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElevationConstraint {
    pub anchor_pos: Vector3<f64>,
    pub floor_height_delta: f64,
    pub normal: Vector3<f64>,
}

impl ElevationConstraint {
    pub fn new(anchor_pos: Vector3<f64>, floor_height_delta: f64) -> Self {
        Self {
            anchor_pos,
            floor_height_delta,
            normal: Vector3::z(),
        }
    }

    pub fn with_normal(mut self, normal: Vector3<f64>) -> Result<Self> {
        let n = normal.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(FusionError::DimensionMismatch("zero elevation normal".into()));
        }
        self.normal = normal / n;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    /// Pre-integration rows followed by the bias random-walk rows.
    ImuPreint {
        pre: PreintegratedImu,
        gravity: Vector3<f64>,
    },
    Tdoa {
        anchor_i: Vector3<f64>,
        anchor_j: Vector3<f64>,
        delta_d: f64,
    },
    UltrasonicRange {
        anchor: Vector3<f64>,
        range: f64,
    },
    Elevation(ElevationConstraint),
    /// `r = H dx - b`, with `dx` the stacked local coordinates of the
    /// connected states around `lin_point`. `H` is already whitened.
    Prior {
        h: DMatrix<f64>,
        b: DVector<f64>,
        lin_point: Vec<NavState>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    /// Window indices of the connected states, in Jacobian order.
    pub states: Vec<usize>,
    pub noise: DMatrix<f64>,
    pub payload: Payload,
    /// Huber threshold on the whitened residual norm.
    pub robust: Option<f64>,
}

/// Residual and one Jacobian block per connected state.
#[derive(Clone, Debug, PartialEq)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Whitened {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
    /// IRLS weight already folded into `residual` and `jacobians`.
    pub weight: f64,
}

impl Factor {
    pub fn imu(i: usize, j: usize, pre: PreintegratedImu, gravity: Vector3<f64>) -> Self {
        let dt = pre.dt_total;
        let mut noise = DMatrix::zeros(15, 15);
        noise.view_mut((0, 0), (9, 9)).copy_from(&pre.covariance);
        let var_bg = pre.noise.gyro_bias_random_walk.powi(2) * dt;
        let var_ba = pre.noise.accel_bias_random_walk.powi(2) * dt;
        for k in 0..3 {
            noise[(9 + k, 9 + k)] = var_bg;
            noise[(12 + k, 12 + k)] = var_ba;
        }
        Self {
            states: vec![i, j],
            noise,
            payload: Payload::ImuPreint { pre, gravity },
            robust: None,
        }
    }

    /// `robust_delta` is in meters and is converted to whitened units.
    pub fn tdoa(
        state: usize,
        anchor_i: Vector3<f64>,
        anchor_j: Vector3<f64>,
        delta_d: f64,
        sigma: f64,
        robust_delta: Option<f64>,
    ) -> Self {
        Self {
            states: vec![state],
            noise: DMatrix::from_element(1, 1, sigma * sigma),
            payload: Payload::Tdoa {
                anchor_i,
                anchor_j,
                delta_d,
            },
            robust: robust_delta.map(|d| d / sigma),
        }
    }

    pub fn ultrasonic(state: usize, anchor: Vector3<f64>, range: f64, sigma: f64) -> Self {
        Self {
            states: vec![state],
            noise: DMatrix::from_element(1, 1, sigma * sigma),
            payload: Payload::UltrasonicRange { anchor, range },
            robust: None,
        }
    }

    pub fn elevation(state: usize, constraint: ElevationConstraint, sigma: f64) -> Self {
        Self {
            states: vec![state],
            noise: DMatrix::from_element(1, 1, sigma * sigma),
            payload: Payload::Elevation(constraint),
            robust: None,
        }
    }

    /// Prior in square-root form; the noise is the identity.
    pub fn prior(
        states: Vec<usize>,
        h: DMatrix<f64>,
        b: DVector<f64>,
        lin_point: Vec<NavState>,
    ) -> Result<Self> {
        let cols = states.len() * tangent::DIM;
        if h.ncols() != cols || h.nrows() != b.len() || lin_point.len() != states.len() {
            return Err(FusionError::DimensionMismatch(format!(
                "prior H is {}x{}, b has {} rows, {} states",
                h.nrows(),
                h.ncols(),
                b.len(),
                states.len()
            )));
        }
        Ok(Self {
            states,
            noise: DMatrix::identity(b.len(), b.len()),
            payload: Payload::Prior { h, b, lin_point },
            robust: None,
        })
    }

    /// Convenience prior pinning one state to `at` with the given tangent sigmas.
    pub fn state_prior(state: usize, at: NavState, sigmas: &[f64; tangent::DIM]) -> Self {
        let h = DMatrix::from_diagonal(&DVector::from_iterator(
            tangent::DIM,
            sigmas.iter().map(|s| 1.0 / s),
        ));
        Self::prior(vec![state], h, DVector::zeros(tangent::DIM), vec![at])
            .expect("dimensions are consistent by construction")
    }

    pub fn kind(&self) -> FactorKind {
        match self.payload {
            Payload::ImuPreint { .. } => FactorKind::ImuPreint,
            Payload::Tdoa { .. } => FactorKind::Tdoa,
            Payload::UltrasonicRange { .. } => FactorKind::UltrasonicRange,
            Payload::Elevation(_) => FactorKind::Elevation,
            Payload::Prior { .. } => FactorKind::Prior,
        }
    }

    pub fn dim(&self) -> usize {
        self.noise.nrows()
    }

    fn connected<'a>(&self, window: &'a [NavState]) -> Result<Vec<&'a NavState>> {
        self.states
            .iter()
            .map(|&k| {
                window.get(k).ok_or_else(|| {
                    FusionError::DimensionMismatch(format!(
                        "factor refers to state {k}, window holds {}",
                        window.len()
                    ))
                })
            })
            .collect()
    }

    pub fn evaluate(&self, window: &[NavState]) -> Result<Linearization> {
        let states = self.connected(window)?;
        let out = match &self.payload {
            Payload::ImuPreint { pre, gravity } => {
                let (si, sj) = (states[0], states[1]);
                let (r9, ji9, jj9) = residual_and_jacobians(si, sj, pre, gravity);
                let mut residual = DVector::zeros(15);
                residual.rows_mut(0, 9).copy_from(&r9);
                residual
                    .rows_mut(9, 3)
                    .copy_from(&(sj.bias.gyro - si.bias.gyro));
                residual
                    .rows_mut(12, 3)
                    .copy_from(&(sj.bias.accel - si.bias.accel));
                let mut ji = DMatrix::zeros(15, tangent::DIM);
                let mut jj = DMatrix::zeros(15, tangent::DIM);
                ji.view_mut((0, 0), (9, 15)).copy_from(&ji9);
                jj.view_mut((0, 0), (9, 15)).copy_from(&jj9);
                for k in 0..6 {
                    ji[(9 + k, tangent::BG + k)] = -1.0;
                    jj[(9 + k, tangent::BG + k)] = 1.0;
                }
                Linearization {
                    residual,
                    jacobians: vec![ji, jj],
                }
            }
            Payload::Tdoa {
                anchor_i,
                anchor_j,
                delta_d,
            } => {
                let s = states[0];
                let p = s.position();
                let r = (p - anchor_i).norm() - (p - anchor_j).norm() - delta_d;
                let g = range_gradient(p, anchor_i) - range_gradient(p, anchor_j);
                scalar(r, &g.transpose(), s)
            }
            Payload::UltrasonicRange { anchor, range } => {
                let s = states[0];
                let p = s.position();
                let r = (p - anchor).norm() - range;
                scalar(r, &range_gradient(p, anchor).transpose(), s)
            }
            Payload::Elevation(c) => {
                let s = states[0];
                let r = c.normal.dot(&(s.position() - c.anchor_pos)) - c.floor_height_delta;
                scalar(r, &c.normal.transpose(), s)
            }
            Payload::Prior { h, b, lin_point } => {
                let n = states.len();
                let mut dx = DVector::zeros(n * tangent::DIM);
                let mut jacobians = Vec::with_capacity(n);
                for (k, (s, s0)) in states.iter().zip(lin_point).enumerate() {
                    let off = k * tangent::DIM;
                    let block = h.columns(off, tangent::DIM);
                    // Exact at the linearization point, where the chart is
                    // zero with identity Jacobian.
                    if *s == s0 {
                        jacobians.push(block.into_owned());
                        continue;
                    }
                    dx.rows_mut(off, tangent::DIM).copy_from(&s0.local(s));
                    let local = s0.local_jacobian(s);
                    jacobians.push(block * DMatrix::from_column_slice(15, 15, local.as_slice()));
                }
                Linearization {
                    residual: h * dx - b,
                    jacobians,
                }
            }
        };
        Ok(out)
    }

    /// Multiplies by the inverse Cholesky factor of the noise and, for robust
    /// factors, by the square root of the Huber IRLS weight.
    pub fn whiten(&self, lin: &Linearization) -> Result<Whitened> {
        let chol = self
            .noise
            .clone()
            .cholesky()
            .ok_or(FusionError::BadNoiseModel)?;
        let l = chol.l();
        let solve = |m: &DMatrix<f64>| {
            l.solve_lower_triangular(m)
                .ok_or(FusionError::BadNoiseModel)
        };
        if lin.residual.len() != self.dim() {
            return Err(FusionError::DimensionMismatch(format!(
                "residual has {} rows, noise is {}x{}",
                lin.residual.len(),
                self.dim(),
                self.dim()
            )));
        }
        let mut residual = solve(&DMatrix::from_column_slice(
            lin.residual.len(),
            1,
            lin.residual.as_slice(),
        ))?
        .column(0)
        .into_owned();
        let mut jacobians = lin
            .jacobians
            .iter()
            .map(solve)
            .collect::<Result<Vec<_>>>()?;
        let weight = match self.robust {
            Some(delta) => huber_weight(residual.norm(), delta),
            None => 1.0,
        };
        if weight != 1.0 {
            let s = weight.sqrt();
            residual *= s;
            for j in jacobians.iter_mut() {
                *j *= s;
            }
        }
        Ok(Whitened {
            residual,
            jacobians,
            weight,
        })
    }

    /// Contribution to the objective: the squared Mahalanobis norm, or twice
    /// its Huber penalty for robust factors.
    pub fn cost(&self, window: &[NavState]) -> Result<f64> {
        let lin = self.evaluate(window)?;
        let chol = self
            .noise
            .clone()
            .cholesky()
            .ok_or(FusionError::BadNoiseModel)?;
        let e = chol
            .l()
            .solve_lower_triangular(&lin.residual)
            .ok_or(FusionError::BadNoiseModel)?
            .norm();
        Ok(match self.robust {
            Some(delta) => 2.0 * huber(e, delta),
            None => e * e,
        })
    }
}

fn scalar(r: f64, d_world: &RowVector3<f64>, s: &NavState) -> Linearization {
    // Right perturbation moves the position by R dp.
    let d_body = d_world * s.rotation().matrix();
    let mut j = DMatrix::zeros(1, tangent::DIM);
    j.view_mut((0, tangent::POS), (1, 3)).copy_from(&d_body);
    Linearization {
        residual: DVector::from_element(1, r),
        jacobians: vec![j],
    }
}

/// Central-difference Jacobians of `f` over its connected states.
pub fn numerical_jacobians(f: &Factor, window: &[NavState], step: f64) -> Result<Vec<DMatrix<f64>>> {
    let rows = f.dim();
    let mut out = Vec::with_capacity(f.states.len());
    for &idx in &f.states {
        let mut j = DMatrix::zeros(rows, tangent::DIM);
        for c in 0..tangent::DIM {
            let mut delta = crate::preintegration::Vector15::zeros();
            delta[c] = step;
            let mut plus = window.to_vec();
            let mut minus = window.to_vec();
            plus[idx] = window[idx].retract(&delta);
            minus[idx] = window[idx].retract(&-delta);
            let rp = f.evaluate(&plus)?.residual;
            let rm = f.evaluate(&minus)?.residual;
            j.column_mut(c).copy_from(&((rp - rm) / (2.0 * step)));
        }
        out.push(j);
    }
    Ok(out)
}

/// Largest entry of `|analytic - numeric|` relative to the larger of the
/// numeric Jacobian's largest entry and one.
pub fn jacobian_relative_error(analytic: &[DMatrix<f64>], numeric: &[DMatrix<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).amax() / n.amax().max(1.0))
        .fold(0.0, f64::max)
}

/// Worst analytic-vs-numeric Jacobian error per factor kind over `points`
/// random linearization points.
pub fn jacobian_self_test(seed: u64, points: usize) -> Result<Vec<(FactorKind, f64)>> {
    use crate::manifold::{so3_exp, Pose};
    use crate::preintegration::{ImuBias, ImuNoise, ImuSample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = |rng: &mut ChaCha8Rng, s: f64| Vector3::from_fn(|_, _| rng.gen_range(-s..s));
    let state = |rng: &mut ChaCha8Rng| {
        NavState::new(
            Pose::new(so3_exp(&v(rng, 2.0)), v(rng, 5.0) + Vector3::new(10.0, 7.0, 1.5)),
            v(rng, 1.0),
            ImuBias::new(v(rng, 0.01), v(rng, 0.1)),
        )
    };
    let kinds = [
        FactorKind::ImuPreint,
        FactorKind::Tdoa,
        FactorKind::UltrasonicRange,
        FactorKind::Elevation,
        FactorKind::Prior,
    ];
    let mut worst = [0.0f64; 5];
    let gravity = Vector3::new(0.0, 0.0, -9.81);
    for _ in 0..points {
        let window = vec![state(&mut rng), state(&mut rng)];
        let mut pre = PreintegratedImu::new(
            ImuBias::new(v(&mut rng, 0.01), v(&mut rng, 0.1)),
            ImuNoise::default(),
        );
        for k in 0..10 {
            let s = ImuSample {
                t: k as f64 * 0.005,
                accel: v(&mut rng, 2.0) + Vector3::new(0.0, 0.0, 9.81),
                gyro: v(&mut rng, 0.5),
            };
            pre.push(&s, 0.005)?;
        }
        let anchor = v(&mut rng, 10.0);
        let other = v(&mut rng, 10.0);
        let normal = v(&mut rng, 1.0) + Vector3::new(0.0, 0.0, 0.1);
        let h = DMatrix::from_fn(12, 30, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
        let lin_point = vec![state(&mut rng), state(&mut rng)];
        let factors = [
            Factor::imu(0, 1, pre, gravity),
            Factor::tdoa(1, anchor, other, 0.3, 0.1, None),
            Factor::ultrasonic(0, anchor, 2.0, 0.02),
            Factor::elevation(1, ElevationConstraint::new(anchor, 1.0).with_normal(normal)?, 0.05),
            Factor::prior(vec![0, 1], h, b, lin_point)?,
        ];
        for (k, f) in factors.iter().enumerate() {
            let analytic = f.evaluate(&window)?.jacobians;
            let numeric = numerical_jacobians(f, &window, 1e-6)?;
            worst[k] = worst[k].max(jacobian_relative_error(&analytic, &numeric));
        }
    }
    Ok(kinds.into_iter().zip(worst).collect())
}
