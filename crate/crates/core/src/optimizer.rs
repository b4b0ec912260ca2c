//! Sliding-window smoother: Levenberg-Marquardt over the window, Schur
//! complement marginalization of the oldest keyframe, and TDoA covariance
//! scaling for NLOS mitigation.

use crate::error::{FusionError, Result};
use crate::factors::{Factor, FactorKind};
use crate::preintegration::{tangent, ImuNoise, NavState, Vector15};
use crate::tdoa::{tdoa_residual, AnchorId, AnchorSet, TdoaMeasurement};
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

/// Damping beyond which a failing Cholesky is reported as singular.
pub const MAX_LAMBDA: f64 = 1e8;

/// Eigenvalues of a marginal prior below this fraction of the largest are dropped.
const PRIOR_RANK_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlosConfig {
    pub ultrasonic_gate_enabled: bool,
    pub residual_gate_enabled: bool,
    /// Threshold on the rolling mean of squared whitened residuals.
    pub gate_chi2: f64,
    pub inflation_base: f64,
    pub residual_window: usize,
    /// meters
    pub ultrasonic_disagreement_gate: f64,
    /// Minimum ultrasonic ranges for a usable ultrasonic position.
    pub min_ultrasonic_ranges: usize,
}

impl Default for NlosConfig {
    fn default() -> Self {
        Self {
            ultrasonic_gate_enabled: true,
            residual_gate_enabled: true,
            gate_chi2: 3.0,
            inflation_base: 5.0,
            residual_window: 10,
            ultrasonic_disagreement_gate: 0.3,
            min_ultrasonic_ranges: 3,
        }
    }
}

impl NlosConfig {
    pub fn enabled(&self) -> bool {
        self.ultrasonic_gate_enabled || self.residual_gate_enabled
    }

    pub fn disabled() -> Self {
        Self {
            ultrasonic_gate_enabled: false,
            residual_gate_enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub gravity: Vector3<f64>,
    pub window_size: usize,
    pub lm_initial_lambda: f64,
    pub lm_lambda_up: f64,
    pub lm_lambda_down: f64,
    pub max_iterations: usize,
    /// Stop once the LM step norm falls below this.
    pub convergence_tol: f64,
    /// meters; `None` disables the Huber loss on TDoA factors.
    pub huber_delta: Option<f64>,
    pub nlos: NlosConfig,
    pub imu_noise: ImuNoise,
    pub sigma_tdoa: f64,
    pub sigma_ultrasonic: f64,
    pub sigma_elevation: f64,
    pub use_ultrasonic: bool,
    pub use_elevation: bool,
    /// Ultrasonic epochs farther than this from a keyframe are dropped, seconds.
    pub ultrasonic_association: f64,
    /// Tangent sigmas of the prior on the first keyframe.
    pub initial_sigmas: [f64; tangent::DIM],
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            gravity: Vector3::new(0.0, 0.0, -9.81),
            window_size: 10,
            lm_initial_lambda: 1e-4,
            lm_lambda_up: 10.0,
            lm_lambda_down: 0.5,
            max_iterations: 20,
            convergence_tol: 1e-7,
            huber_delta: Some(0.3),
            nlos: NlosConfig::default(),
            imu_noise: ImuNoise::default(),
            sigma_tdoa: 0.10,
            sigma_ultrasonic: 0.02,
            sigma_elevation: 0.05,
            use_ultrasonic: true,
            use_elevation: true,
            ultrasonic_association: 0.025,
            initial_sigmas: [
                0.01, 0.01, 0.01, // attitude, rad
                0.01, 0.01, 0.01, // position, m
                0.01, 0.01, 0.01, // velocity, m/s
                0.01, 0.01, 0.01, // gyro bias, rad/s
                0.1, 0.1, 0.1, // accel bias, m/s^2
            ],
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lm_initial_lambda", self.lm_initial_lambda),
            ("lm_lambda_up", self.lm_lambda_up),
            ("lm_lambda_down", self.lm_lambda_down),
            ("convergence_tol", self.convergence_tol),
            ("sigma_tdoa", self.sigma_tdoa),
            ("sigma_ultrasonic", self.sigma_ultrasonic),
            ("sigma_elevation", self.sigma_elevation),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(FusionError::Scenario(format!("engine.{name} must be positive")));
            }
        }
        if self.window_size < 2 {
            return Err(FusionError::Scenario("engine.window_size must be at least 2".into()));
        }
        if self.lm_lambda_up <= 1.0 || self.lm_lambda_down >= 1.0 {
            return Err(FusionError::Scenario(
                "engine.lm_lambda_up must exceed 1 and lm_lambda_down must be below 1".into(),
            ));
        }
        if self.nlos.inflation_base < 1.0 {
            return Err(FusionError::Scenario("engine.nlos.inflation_base must be >= 1".into()));
        }
        if matches!(self.huber_delta, Some(d) if !(d > 0.0)) {
            return Err(FusionError::Scenario("engine.huber_delta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub initial_error: f64,
    pub final_error: f64,
    pub final_lambda: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginalizationReport {
    pub factors_consumed: usize,
    /// Negative eigenvalues of the Schur complement clamped to zero.
    pub clamped_eigenvalues: usize,
    pub prior_rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowGraph {
    pub states: Vec<NavState>,
    pub times: Vec<f64>,
    pub factors: Vec<Factor>,
    /// Square-root form `r = A dx - b`; its Hessian is `A^T A`.
    pub prior: Option<Factor>,
    pub window_size: usize,
    pub marginalized: usize,
    pub last_marginalization: Option<MarginalizationReport>,
}

impl WindowGraph {
    pub fn new(window_size: usize) -> Self {
        Self {
            window_size,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> Option<(&NavState, f64)> {
        self.states.last().zip(self.times.last().copied())
    }

    /// Hessian and gradient-side vector of the window prior, `(A^T A, A^T b)`.
    pub fn prior_hessian(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        self.prior.as_ref().map(|f| match &f.payload {
            crate::factors::Payload::Prior { h, b, .. } => (h.transpose() * h, h.transpose() * b),
            _ => unreachable!("window prior is always a prior factor"),
        })
    }

    /// Appends a keyframe, marginalizing the oldest one if the window overflows.
    /// Returns the index of the new state.
    pub fn add_keyframe(&mut self, state_init: NavState, t: f64) -> Result<usize> {
        if let Some(&last) = self.times.last() {
            if !(t > last) {
                return Err(FusionError::OutOfOrder { t, last });
            }
        }
        self.states.push(state_init);
        self.times.push(t);
        while self.states.len() > self.window_size.max(1) {
            self.marginalize(0)?;
        }
        Ok(self.states.len() - 1)
    }

    pub fn add_factor(&mut self, f: Factor) -> Result<()> {
        if let Some(&k) = f.states.iter().find(|&&k| k >= self.states.len()) {
            return Err(FusionError::DimensionMismatch(format!(
                "factor refers to state {k}, window holds {}",
                self.states.len()
            )));
        }
        if f.kind() == FactorKind::Prior && self.prior.is_none() {
            self.prior = Some(f);
        } else {
            self.factors.push(f);
        }
        Ok(())
    }

    fn all_factors(&self) -> impl Iterator<Item = &Factor> {
        self.prior.iter().chain(self.factors.iter())
    }

    pub fn total_error(&self) -> Result<f64> {
        self.error_at(&self.states)
    }

    fn error_at(&self, states: &[NavState]) -> Result<f64> {
        self.all_factors().map(|f| f.cost(states)).sum()
    }

    /// Whitened normal equations `(J^T J, J^T r)` over the states in `index`
    /// (window index to block position).
    fn normal_equations<'a>(
        states: &[NavState],
        factors: impl Iterator<Item = &'a Factor>,
        index: &BTreeMap<usize, usize>,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = index.len() * tangent::DIM;
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for f in factors {
            let w = f.whiten(&f.evaluate(states)?)?;
            let blocks: Vec<usize> = f.states.iter().map(|k| index[k] * tangent::DIM).collect();
            for (a, ja) in blocks.iter().zip(&w.jacobians) {
                let jta = ja.transpose();
                let mut gv = g.rows_mut(*a, tangent::DIM);
                gv += &jta * &w.residual;
                for (b, jb) in blocks.iter().zip(&w.jacobians) {
                    let mut hv = h.view_mut((*a, *b), (tangent::DIM, tangent::DIM));
                    hv += &jta * jb;
                }
            }
        }
        Ok((h, g))
    }

    /// Levenberg-Marquardt over every state in the window.
    pub fn optimize(&mut self, cfg: &EngineConfig) -> Result<OptimizeReport> {
        if self.states.is_empty() {
            return Err(FusionError::InsufficientConstraints("empty window".into()));
        }
        let index: BTreeMap<usize, usize> = (0..self.states.len()).map(|k| (k, k)).collect();
        let n = self.states.len() * tangent::DIM;
        let mut lambda = cfg.lm_initial_lambda;
        let mut current = self.total_error()?;
        let mut report = OptimizeReport {
            initial_error: current,
            ..Default::default()
        };
        let mut system = None;
        for _ in 0..cfg.max_iterations {
            report.iterations += 1;
            if system.is_none() {
                system = Some(Self::normal_equations(&self.states, self.all_factors(), &index)?);
            }
            let (h, g) = system.as_ref().expect("built above");
            let step = loop {
                let mut damped = h.clone();
                for k in 0..n {
                    damped[(k, k)] += lambda;
                }
                if let Some(chol) = damped.cholesky() {
                    let step = -chol.solve(g);
                    if step.iter().all(|x| x.is_finite()) {
                        break step;
                    }
                }
                if lambda >= MAX_LAMBDA {
                    return Err(FusionError::SingularSystem { lambda });
                }
                lambda = (lambda * cfg.lm_lambda_up).min(MAX_LAMBDA);
            };
            if step.norm() < cfg.convergence_tol {
                break;
            }
            let trial: Vec<NavState> = self
                .states
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    s.retract(&Vector15::from_column_slice(
                        step.rows(k * tangent::DIM, tangent::DIM).as_slice(),
                    ))
                })
                .collect();
            let e = self.error_at(&trial)?;
            if e < current {
                self.states = trial;
                current = e;
                lambda *= cfg.lm_lambda_down;
                report.accepted += 1;
                system = None;
            } else {
                lambda = (lambda * cfg.lm_lambda_up).min(MAX_LAMBDA);
                report.rejected += 1;
                if lambda >= MAX_LAMBDA {
                    break;
                }
            }
        }
        report.final_error = current;
        report.final_lambda = lambda;
        Ok(report)
    }

    /// Folds every factor touching `state_index` (and the current prior) into
    /// a new prior on the states they connect to, then removes the state.
    pub fn marginalize(&mut self, state_index: usize) -> Result<MarginalizationReport> {
        if state_index >= self.states.len() {
            return Err(FusionError::DimensionMismatch(format!(
                "cannot marginalize state {state_index} of {}",
                self.states.len()
            )));
        }
        let (touching, rest): (Vec<Factor>, Vec<Factor>) = std::mem::take(&mut self.factors)
            .into_iter()
            .partition(|f| f.states.contains(&state_index));
        self.factors = rest;
        let mut consumed: Vec<Factor> = touching;
        if let Some(p) = self.prior.take() {
            consumed.push(p);
        }
        let mut involved: Vec<usize> = consumed.iter().flat_map(|f| f.states.iter().copied()).collect();
        involved.push(state_index);
        involved.sort_unstable();
        involved.dedup();
        let kept: Vec<usize> = involved.iter().copied().filter(|&k| k != state_index).collect();

        // Marginalized block first.
        let mut index = BTreeMap::new();
        index.insert(state_index, 0);
        for (pos, &k) in kept.iter().enumerate() {
            index.insert(k, pos + 1);
        }
        let (h, g) = Self::normal_equations(&self.states, consumed.iter(), &index)?;
        let m = tangent::DIM;
        let r = kept.len() * m;
        let mut report = MarginalizationReport {
            factors_consumed: consumed.len(),
            ..Default::default()
        };

        if r > 0 {
            let h_mm = h.view((0, 0), (m, m)).into_owned();
            let h_mr = h.view((0, m), (m, r)).into_owned();
            let h_rr = h.view((m, m), (r, r)).into_owned();
            let g_m = g.rows(0, m).into_owned();
            let g_r = g.rows(m, r).into_owned();
            let h_mm_inv = pseudo_inverse(&h_mm);
            let h_star = &h_rr - h_mr.transpose() * &h_mm_inv * &h_mr;
            let g_star = &g_r - h_mr.transpose() * &h_mm_inv * &g_m;
            let h_star = 0.5 * (&h_star + h_star.transpose());

            let eig = h_star.symmetric_eigen();
            let largest = eig.eigenvalues.max().max(0.0);
            report.clamped_eigenvalues = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
            let keep: Vec<usize> = (0..r)
                .filter(|&k| eig.eigenvalues[k] > PRIOR_RANK_TOL * largest && largest > 0.0)
                .collect();
            report.prior_rank = keep.len();
            if !keep.is_empty() {
                let mut a = DMatrix::zeros(keep.len(), r);
                let mut b = DVector::zeros(keep.len());
                for (row, &k) in keep.iter().enumerate() {
                    let l = eig.eigenvalues[k];
                    let u = eig.eigenvectors.column(k);
                    a.row_mut(row).copy_from(&(u.transpose() * l.sqrt()));
                    b[row] = -u.dot(&g_star) / l.sqrt();
                }
                let shifted: Vec<usize> = kept
                    .iter()
                    .map(|&k| if k > state_index { k - 1 } else { k })
                    .collect();
                let lin_point = kept.iter().map(|&k| self.states[k]).collect();
                self.prior = Some(Factor::prior(shifted, a, b, lin_point)?);
            }
        }

        self.states.remove(state_index);
        self.times.remove(state_index);
        for f in self.factors.iter_mut() {
            for k in f.states.iter_mut() {
                if *k > state_index {
                    *k -= 1;
                }
            }
        }
        self.marginalized += 1;
        self.last_marginalization = Some(report.clone());
        Ok(report)
    }
}

fn pseudo_inverse(h: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = h.clone().cholesky() {
        return chol.inverse();
    }
    let eig = h.clone().symmetric_eigen();
    let largest = eig.eigenvalues.amax();
    let inv = eig.eigenvalues.map(|l| if l > PRIOR_RANK_TOL * largest { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Inputs to [`scale_tdoa_covariance`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NlosContext {
    /// Position solved from line-of-sight ultrasonic ranges, when enough exist.
    pub ultrasonic_position: Option<Vector3<f64>>,
    /// Recent whitened residuals per ordered anchor pair.
    pub history: BTreeMap<(AnchorId, AnchorId), VecDeque<f64>>,
}

impl NlosContext {
    /// Pushes the whitened residual of `m` at `p`, keeping `window` entries.
    pub fn record(
        &mut self,
        m: &TdoaMeasurement,
        p: &Vector3<f64>,
        anchors: &AnchorSet,
        window: usize,
    ) -> Result<()> {
        let r = tdoa_residual(p, m, anchors)? / m.sigma;
        let h = self.history.entry((m.anchor_i, m.anchor_j)).or_default();
        h.push_back(r);
        while h.len() > window.max(1) {
            h.pop_front();
        }
        Ok(())
    }
}

/// Two-stage inflation of a TDoA sigma; residual values are untouched.
pub fn scale_tdoa_covariance(
    m: &TdoaMeasurement,
    anchors: &AnchorSet,
    ctx: &NlosContext,
    cfg: &NlosConfig,
) -> Result<TdoaMeasurement> {
    let mut out = *m;
    if cfg.ultrasonic_gate_enabled {
        if let Some(p) = &ctx.ultrasonic_position {
            if tdoa_residual(p, m, anchors)?.abs() > cfg.ultrasonic_disagreement_gate {
                out.sigma *= cfg.inflation_base;
            }
        }
    }
    if cfg.residual_gate_enabled {
        if let Some(h) = ctx.history.get(&(m.anchor_i, m.anchor_j)) {
            if !h.is_empty() {
                let mean = h.iter().map(|r| r * r).sum::<f64>() / h.len() as f64;
                if mean > cfg.gate_chi2 {
                    out.sigma *= mean / cfg.gate_chi2;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::ElevationConstraint;
    use crate::manifold::Pose;
    use crate::preintegration::ImuBias;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Linear problem: identity attitudes held by a rotation prior, dense
    /// random priors on the remaining dims.
    fn linear_factors(rng: &mut ChaCha8Rng, n: usize) -> (Vec<NavState>, Vec<Factor>) {
        let states: Vec<NavState> = (0..n)
            .map(|_| {
                NavState::new(
                    Pose::from_translation(Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))),
                    Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                    ImuBias::default(),
                )
            })
            .collect();
        let mut factors = Vec::new();
        for k in 0..n {
            let mut h = DMatrix::zeros(3, 15);
            for d in 0..3 {
                h[(d, d)] = 10.0;
            }
            factors.push(Factor::prior(vec![k], h, DVector::zeros(3), vec![states[k]]).unwrap());
        }
        // Well-conditioned blocks over (p, v, bg, ba), 24 rows each.
        let block = |rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(24, 12, |r, c| {
                let d = if r % 12 == c { 3.0 } else { 0.0 };
                d + rng.gen_range(-0.5..0.5)
            })
        };
        let mut unary = DMatrix::zeros(24, 15);
        unary.view_mut((0, 3), (24, 12)).copy_from(&block(rng));
        let b = DVector::from_fn(24, |_, _| rng.gen_range(-1.0..1.0));
        factors.push(Factor::prior(vec![0], unary, b, vec![states[0]]).unwrap());
        for k in 1..n {
            let mut h = DMatrix::zeros(24, 30);
            h.view_mut((0, 3), (24, 12)).copy_from(&block(rng));
            h.view_mut((0, 18), (24, 12)).copy_from(&(-block(rng)));
            let b = DVector::from_fn(24, |_, _| rng.gen_range(-1.0..1.0));
            factors.push(Factor::prior(vec![k - 1, k], h, b, vec![states[k - 1], states[k]]).unwrap());
        }
        (states, factors)
    }

    fn linear_cfg() -> EngineConfig {
        EngineConfig {
            lm_initial_lambda: 1e-14,
            convergence_tol: 1e-9,
            ..EngineConfig::default()
        }
    }

    /// Closed-form solution of the stacked linear system.
    fn closed_form(states: &[NavState], factors: &[Factor]) -> DVector<f64> {
        let index: BTreeMap<usize, usize> = (0..states.len()).map(|k| (k, k)).collect();
        let (h, g) = WindowGraph::normal_equations(states, factors.iter(), &index).unwrap();
        -h.cholesky().unwrap().solve(&g)
    }

    #[test]
    fn lifecycle() {
        let mut g = WindowGraph::new(10);
        g.add_keyframe(NavState::default(), 0.0).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.prior.is_none());
        assert!(matches!(
            g.add_keyframe(NavState::default(), 0.0),
            Err(FusionError::OutOfOrder { .. })
        ));
        g.add_factor(Factor::state_prior(0, NavState::default(), &[0.1; 15])).unwrap();
        for k in 1..=10 {
            let idx = g.add_keyframe(NavState::default(), k as f64 * 0.05).unwrap();
            let mut h = DMatrix::zeros(15, 30);
            h.view_mut((0, 0), (15, 15)).fill_with_identity();
            h.view_mut((0, 15), (15, 15)).copy_from(&(-DMatrix::<f64>::identity(15, 15)));
            let lin = vec![NavState::default(); 2];
            g.add_factor(Factor::prior(vec![idx - 1, idx], h, DVector::zeros(15), lin).unwrap())
                .unwrap();
        }
        assert_eq!(g.len(), 10);
        assert_eq!(g.marginalized, 1);
        assert!(g.prior.is_some());
    }

    #[test]
    fn linear_problem_converges_in_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (states, factors) = linear_factors(&mut rng, 3);
        let expected = closed_form(&states, &factors);
        let mut g = WindowGraph::new(10);
        for (k, s) in states.iter().enumerate() {
            g.add_keyframe(*s, k as f64).unwrap();
        }
        for f in factors.clone() {
            g.add_factor(f).unwrap();
        }
        let report = g.optimize(&linear_cfg()).unwrap();
        assert_eq!(report.accepted, 1);
        for (k, s) in g.states.iter().enumerate() {
            let dx = states[k].local(s);
            let want = expected.rows(k * 15, 15);
            assert!((dx - want).amax() < 1e-10);
        }
        assert!(report.final_error <= report.initial_error);
    }

    #[test]
    fn marginalizing_a_prior_only_state_reduces_the_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (states, _) = linear_factors(&mut rng, 2);
        let mut g = WindowGraph::new(10);
        g.add_keyframe(states[0], 0.0).unwrap();
        g.add_keyframe(states[1], 1.0).unwrap();
        let h = DMatrix::from_fn(30, 30, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(30, |_, _| rng.gen_range(-1.0..1.0));
        g.add_factor(Factor::prior(vec![0, 1], h.clone(), b.clone(), states.clone()).unwrap())
            .unwrap();
        g.marginalize(0).unwrap();
        // Expected reduction computed directly from the information form.
        let info = h.transpose() * &h;
        let eta = h.transpose() * &b;
        let h_mm_inv = info.view((0, 0), (15, 15)).into_owned().try_inverse().unwrap();
        let h_mr = info.view((0, 15), (15, 15)).into_owned();
        let want_h = info.view((15, 15), (15, 15)) - h_mr.transpose() * &h_mm_inv * &h_mr;
        let want_eta = eta.rows(15, 15) - h_mr.transpose() * &h_mm_inv * eta.rows(0, 15);
        let (got_h, got_eta) = g.prior_hessian().unwrap();
        assert!((got_h - &want_h).amax() < 1e-8 * want_h.amax());
        assert!((got_eta - &want_eta).amax() < 1e-8 * want_eta.amax().max(1.0));
        assert_eq!(g.prior.as_ref().unwrap().states, vec![0]);
    }

    #[test]
    fn linear_chain_marginalization_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (states, factors) = linear_factors(&mut rng, 3);
        let batch = closed_form(&states, &factors);

        let mut g = WindowGraph::new(10);
        for (k, s) in states.iter().enumerate() {
            g.add_keyframe(*s, k as f64).unwrap();
        }
        for f in factors {
            g.add_factor(f).unwrap();
        }
        g.marginalize(0).unwrap();
        g.optimize(&linear_cfg()).unwrap();
        for (k, s) in g.states.iter().enumerate() {
            let dx = states[k + 1].local(s);
            let want = batch.rows((k + 1) * 15, 15);
            assert!((dx - want).amax() < 1e-8, "{}", (dx - want).amax());
        }
    }

    #[test]
    fn singular_system_is_reported() {
        let mut g = WindowGraph::new(10);
        g.add_keyframe(NavState::default(), 0.0).unwrap();
        // A single elevation factor leaves 14 directions free; damping keeps
        // the solve well posed, so only a non-finite system fails.
        g.add_factor(Factor::elevation(0, ElevationConstraint::new(Vector3::zeros(), 1.0), 0.05))
            .unwrap();
        assert!(g.optimize(&EngineConfig::default()).is_ok());
        g.add_factor(Factor::elevation(
            0,
            ElevationConstraint::new(Vector3::new(f64::NAN, 0.0, 0.0), 1.0),
            0.05,
        ))
        .unwrap();
        assert!(matches!(
            g.optimize(&EngineConfig::default()),
            Err(FusionError::SingularSystem { .. })
        ));
    }

    fn pair_setup() -> (AnchorSet, TdoaMeasurement) {
        let anchors = crate::tdoa::tests::eight_anchor_layout();
        let p = Vector3::new(6.0, 5.0, 1.2);
        let m = crate::tdoa::forward_tdoas(&p, &anchors, 0.1)[2];
        (anchors, m)
    }

    #[test]
    fn clean_context_passes_through() {
        let (anchors, m) = pair_setup();
        let p = Vector3::new(6.0, 5.0, 1.2);
        let mut ctx = NlosContext {
            ultrasonic_position: Some(p + Vector3::new(0.01, 0.0, 0.0)),
            ..Default::default()
        };
        for _ in 0..10 {
            ctx.record(&m, &p, &anchors, 10).unwrap();
        }
        let out = scale_tdoa_covariance(&m, &anchors, &ctx, &NlosConfig::default()).unwrap();
        assert_eq!(out, m);
        let empty = scale_tdoa_covariance(&m, &anchors, &NlosContext::default(), &NlosConfig::default())
            .unwrap();
        assert_eq!(empty, m);
    }

    #[test]
    fn biased_pair_is_inflated_and_others_are_not() {
        let anchors = crate::tdoa::tests::eight_anchor_layout();
        let p = Vector3::new(6.0, 5.0, 1.2);
        let mut ms = crate::tdoa::forward_tdoas(&p, &anchors, 0.1);
        ms[3].delta_d += 1.0;
        let mut ctx = NlosContext {
            ultrasonic_position: Some(p),
            ..Default::default()
        };
        for m in &ms {
            ctx.record(m, &p, &anchors, 10).unwrap();
        }
        for (k, m) in ms.iter().enumerate() {
            let out = scale_tdoa_covariance(m, &anchors, &ctx, &NlosConfig::default()).unwrap();
            assert_eq!(out.delta_d, m.delta_d);
            if k == 3 {
                assert!(out.sigma > m.sigma);
            } else {
                assert_eq!(out.sigma, m.sigma);
            }
        }
    }

    #[test]
    fn inflation_is_monotone_in_disagreement() {
        let (anchors, m) = pair_setup();
        let p = Vector3::new(6.0, 5.0, 1.2);
        let cfg = NlosConfig::default();
        let mut last = 0.0;
        for k in 0..200 {
            let mut biased = m;
            biased.delta_d += k as f64 * 0.01;
            let mut ctx = NlosContext {
                ultrasonic_position: Some(p),
                ..Default::default()
            };
            ctx.record(&biased, &p, &anchors, 10).unwrap();
            let s = scale_tdoa_covariance(&biased, &anchors, &ctx, &cfg).unwrap().sigma;
            assert!(s >= last);
            last = s;
        }
    }
}
