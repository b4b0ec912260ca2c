//! Error-state EKF baseline over the same 15-dim state as the smoother.
//!
//! Error state: `(dtheta, dp, dv, dbg, dba)` with `dtheta` a right
//! perturbation of the attitude and `dp`, `dv` in the world frame. Measurement
//! Jacobians come from [`crate::factors`] and are mapped from the body-frame
//! position perturbation to the world frame.

use crate::error::{FusionError, Result};
use crate::factors::Factor;
use crate::manifold::{skew, so3_exp, so3_right_jacobian};
use crate::preintegration::{tangent::*, ImuNoise, ImuSample, NavState};
use crate::tdoa::{AnchorSet, TdoaMeasurement, UltrasonicRange};
use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

pub type Matrix15 = SMatrix<f64, 15, 15>;
type Row15 = SMatrix<f64, 1, 15>;

/// Innovation gate in standard deviations.
pub const GATE_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EkfState {
    pub nominal: NavState,
    pub error_covariance: Matrix15,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateOutcome {
    Applied,
    Gated,
}

impl EkfState {
    pub fn new(nominal: NavState, error_covariance: Matrix15) -> Self {
        Self {
            nominal,
            error_covariance,
        }
    }

    /// One zero-order-hold IMU step.
    pub fn propagate(
        &mut self,
        sample: &ImuSample,
        dt: f64,
        gravity: &Vector3<f64>,
        noise: &ImuNoise,
    ) -> Result<()> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(FusionError::InvalidTimestep(dt));
        }
        let s = &self.nominal;
        let omega = sample.gyro - s.bias.gyro;
        let acc = sample.accel - s.bias.accel;
        let r = s.rotation().matrix();
        let step = so3_exp(&(omega * dt));
        let jr = so3_right_jacobian(&(omega * dt));
        let acc_hat = skew(&acc);
        let dt2 = dt * dt;

        let mut f = Matrix15::identity();
        f.fixed_view_mut::<3, 3>(ROT, ROT)
            .copy_from(&step.matrix().transpose());
        f.fixed_view_mut::<3, 3>(ROT, BG).copy_from(&(-jr * dt));
        f.fixed_view_mut::<3, 3>(VEL, ROT)
            .copy_from(&(-r * acc_hat * dt));
        f.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&(-r * dt));
        f.fixed_view_mut::<3, 3>(POS, ROT)
            .copy_from(&(-0.5 * r * acc_hat * dt2));
        f.fixed_view_mut::<3, 3>(POS, VEL)
            .copy_from(&(nalgebra::Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(POS, BA)
            .copy_from(&(-0.5 * r * dt2));

        let mut q = Matrix15::zeros();
        let var_g = noise.gyro_noise_density.powi(2) / dt;
        let var_a = noise.accel_noise_density.powi(2) / dt;
        let mut g_block = SMatrix::<f64, 15, 3>::zeros();
        g_block.fixed_view_mut::<3, 3>(ROT, 0).copy_from(&(jr * dt));
        q += g_block * g_block.transpose() * var_g;
        let mut a_block = SMatrix::<f64, 15, 3>::zeros();
        a_block.fixed_view_mut::<3, 3>(VEL, 0).copy_from(&(r * dt));
        a_block
            .fixed_view_mut::<3, 3>(POS, 0)
            .copy_from(&(0.5 * r * dt2));
        q += a_block * a_block.transpose() * var_a;
        for k in 0..3 {
            q[(BG + k, BG + k)] = noise.gyro_bias_random_walk.powi(2) * dt;
            q[(BA + k, BA + k)] = noise.accel_bias_random_walk.powi(2) * dt;
        }

        let p = f * self.error_covariance * f.transpose() + q;
        self.error_covariance = 0.5 * (p + p.transpose());

        let rotated = s.rotation().rotate(&acc);
        let v = s.velocity;
        let mut next = *s;
        next.pose.translation += v * dt + 0.5 * gravity * dt2 + 0.5 * rotated * dt2;
        next.velocity += gravity * dt + rotated * dt;
        next.pose.rotation = s.rotation().compose(&step);
        self.nominal = next;
        Ok(())
    }

    /// Scalar update from any one-row factor, sharing its residual and Jacobian.
    pub fn update_scalar(&mut self, f: &Factor) -> Result<UpdateOutcome> {
        if f.dim() != 1 || f.states != [0] {
            return Err(FusionError::DimensionMismatch(
                "EKF updates take one-row factors on state 0".into(),
            ));
        }
        let lin = f.evaluate(std::slice::from_ref(&self.nominal))?;
        let r = lin.residual[0];
        let j = &lin.jacobians[0];
        let mut h = Row15::from_row_slice(j.as_slice());
        // Body-frame position perturbation to world frame.
        let rt = self.nominal.rotation().matrix().transpose();
        let pos = h.fixed_view::<1, 3>(0, POS) * rt;
        h.fixed_view_mut::<1, 3>(0, POS).copy_from(&pos);

        let var = f.noise[(0, 0)];
        let p = &self.error_covariance;
        let s = (h * p * h.transpose())[(0, 0)] + var;
        if !(s > 0.0) {
            return Err(FusionError::BadNoiseModel);
        }
        if r * r > GATE_SIGMAS * GATE_SIGMAS * s {
            return Ok(UpdateOutcome::Gated);
        }
        let k: SVector<f64, 15> = p * h.transpose() / s;
        let dx = k * (-r);
        let ikh = Matrix15::identity() - k * h;
        let p_new = ikh * p * ikh.transpose() + k * k.transpose() * var;
        self.error_covariance = 0.5 * (p_new + p_new.transpose());
        self.inject(&dx);
        Ok(UpdateOutcome::Applied)
    }

    fn inject(&mut self, dx: &SVector<f64, 15>) {
        let n = &mut self.nominal;
        n.pose.rotation = n
            .pose
            .rotation
            .compose(&so3_exp(&dx.fixed_rows::<3>(ROT).into_owned()));
        n.pose.translation += dx.fixed_rows::<3>(POS);
        n.velocity += dx.fixed_rows::<3>(VEL);
        n.bias.gyro += dx.fixed_rows::<3>(BG);
        n.bias.accel += dx.fixed_rows::<3>(BA);
    }

    pub fn update_tdoa(&mut self, m: &TdoaMeasurement, anchors: &AnchorSet) -> Result<UpdateOutcome> {
        let f = Factor::tdoa(
            0,
            anchors.position(m.anchor_i)?,
            anchors.position(m.anchor_j)?,
            m.delta_d,
            m.sigma,
            None,
        );
        self.update_scalar(&f)
    }

    pub fn update_ultrasonic(
        &mut self,
        m: &UltrasonicRange,
        anchors: &AnchorSet,
    ) -> Result<UpdateOutcome> {
        let f = Factor::ultrasonic(0, anchors.position(m.anchor_id)?, m.range, m.sigma);
        self.update_scalar(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::ElevationConstraint;
    use crate::manifold::Pose;
    use crate::preintegration::{predict, ImuBias, PreintegratedImu};
    use crate::tdoa::forward_tdoas;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn g() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -9.81)
    }

    fn start(p: Vector3<f64>) -> EkfState {
        EkfState::new(
            NavState::new(Pose::new(crate::manifold::Rotation::from_yaw(0.4), p), Vector3::zeros(), ImuBias::default()),
            Matrix15::identity() * 1e-2,
        )
    }

    #[test]
    fn stationary_propagation() {
        let mut s = start(Vector3::new(1.0, 2.0, 1.0));
        let before = s.nominal;
        let sample = ImuSample {
            t: 0.0,
            accel: s.nominal.rotation().inverse_rotate(&(-g())),
            gyro: Vector3::zeros(),
        };
        let mut trace = s.error_covariance.trace();
        for _ in 0..200 {
            s.propagate(&sample, 0.005, &g(), &ImuNoise::default()).unwrap();
            let t = s.error_covariance.trace();
            assert!(t >= trace);
            trace = t;
        }
        assert!((s.nominal.position() - before.position()).amax() < 1e-12);
        assert!(s.nominal.velocity.amax() < 1e-12);
        assert!(s.propagate(&sample, 0.0, &g(), &ImuNoise::default()).is_err());
    }

    #[test]
    fn single_step_matches_predict() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let v = |rng: &mut ChaCha8Rng, s: f64| Vector3::from_fn(|_, _| rng.gen_range(-s..s));
            let nominal = NavState::new(
                Pose::new(so3_exp(&v(&mut rng, 2.0)), v(&mut rng, 5.0)),
                v(&mut rng, 1.0),
                ImuBias::new(v(&mut rng, 0.01), v(&mut rng, 0.1)),
            );
            let sample = ImuSample {
                t: 0.0,
                accel: v(&mut rng, 3.0),
                gyro: v(&mut rng, 1.0),
            };
            let mut ekf = EkfState::new(nominal, Matrix15::identity());
            ekf.propagate(&sample, 0.005, &g(), &ImuNoise::default()).unwrap();
            let mut pre = PreintegratedImu::new(nominal.bias, ImuNoise::default());
            pre.push(&sample, 0.005).unwrap();
            let want = predict(&nominal, &pre, &g());
            assert!((ekf.nominal.position() - want.position()).amax() < 1e-12);
            assert!((ekf.nominal.velocity - want.velocity).amax() < 1e-12);
            assert!(ekf.nominal.rotation().angle_to(want.rotation()) < 1e-12);
        }
    }

    #[test]
    fn noiseless_update_at_truth() {
        let anchors = crate::tdoa::tests::eight_anchor_layout();
        let p = Vector3::new(7.0, 6.0, 1.1);
        let mut s = start(p);
        let before = s.nominal;
        let trace = s.error_covariance.trace();
        for m in forward_tdoas(&p, &anchors, 0.1) {
            assert_eq!(s.update_tdoa(&m, &anchors).unwrap(), UpdateOutcome::Applied);
        }
        assert!((s.nominal.position() - before.position()).amax() < 1e-12);
        assert!(s.error_covariance.trace() < trace);
    }

    #[test]
    fn converges_from_offset() {
        let anchors = crate::tdoa::tests::eight_anchor_layout();
        let truth = Vector3::new(12.0, 4.0, 1.5);
        let mut s = start(truth + Vector3::new(0.6, -0.6, 0.5));
        s.error_covariance = Matrix15::identity() * 1e-4;
        for k in 0..3 {
            s.error_covariance[(POS + k, POS + k)] = 1.0;
        }
        let ms = forward_tdoas(&truth, &anchors, 0.1);
        let mut epochs = 0;
        while (s.nominal.position() - truth).norm() > 1e-3 {
            epochs += 1;
            assert!(epochs <= 50, "no convergence");
            for m in &ms {
                s.update_tdoa(m, &anchors).unwrap();
            }
            // Keep the filter responsive, as process noise would between epochs.
            for k in 0..3 {
                s.error_covariance[(POS + k, POS + k)] += 1e-2;
            }
        }
    }

    #[test]
    fn gate_rejects_biased_measurement() {
        let anchors = crate::tdoa::tests::eight_anchor_layout();
        let p = Vector3::new(7.0, 6.0, 1.1);
        let mut s = start(p);
        s.error_covariance = Matrix15::identity() * 1e-4;
        let mut m = forward_tdoas(&p, &anchors, 0.1)[0];
        m.delta_d += 2.0;
        let before = s.clone();
        assert_eq!(s.update_tdoa(&m, &anchors).unwrap(), UpdateOutcome::Gated);
        assert_eq!(s, before);
    }

    #[test]
    fn covariance_stays_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let anchors = crate::tdoa::tests::eight_anchor_layout();
        let us = AnchorSet::from_positions(vec![Vector3::new(5.0, 5.0, 3.0), Vector3::new(15.0, 10.0, 3.0)]);
        let mut s = start(Vector3::new(10.0, 7.0, 1.0));
        let noise = Normal::new(0.0, 0.1).unwrap();
        for k in 0..100_000 {
            let sample = ImuSample {
                t: 0.0,
                accel: Vector3::new(0.0, 0.0, 9.81) + Vector3::from_fn(|_, _| rng.gen_range(-0.2..0.2)),
                gyro: Vector3::from_fn(|_, _| rng.gen_range(-0.1..0.1)),
            };
            s.propagate(&sample, 0.005, &g(), &ImuNoise::default()).unwrap();
            if k % 10 == 0 {
                let mut ms = forward_tdoas(s.nominal.position(), &anchors, 0.1);
                for m in ms.iter_mut() {
                    m.delta_d += noise.sample(&mut rng);
                    s.update_tdoa(m, &anchors).unwrap();
                }
                let id = (k / 10 % 2) as u32;
                let r = (s.nominal.position() - us.position(id).unwrap()).norm();
                s.update_ultrasonic(
                    &UltrasonicRange {
                        t: 0.0,
                        anchor_id: id,
                        range: r + 0.01,
                        sigma: 0.02,
                    },
                    &us,
                )
                .unwrap();
            }
            if k % 1000 == 0 {
                let p = &s.error_covariance;
                assert!((p - p.transpose()).amax() == 0.0);
                assert!(p.symmetric_eigenvalues().min() > 0.0);
            }
        }
        assert!(s.error_covariance.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn linear_gaussian_posterior_matches_batch() {
        // Identity attitude: elevation rows are linear in the world position.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Vector3::new(1.0, 2.0, 3.0);
        let mut s = EkfState::new(
            NavState::new(Pose::from_translation(x0), Vector3::zeros(), ImuBias::default()),
            Matrix15::identity() * 0.5,
        );
        let prior_info = DMatrix::<f64>::identity(3, 3) * 2.0;
        let mut info = prior_info.clone();
        let mut eta = DVector::<f64>::zeros(3);
        for _ in 0..10 {
            let n = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
            let h = rng.gen_range(-0.2..0.2) + n.dot(&x0);
            let sigma = 0.3;
            let c = ElevationConstraint::new(Vector3::zeros(), h).with_normal(n).unwrap();
            assert_eq!(s.update_scalar(&Factor::elevation(0, c, sigma)).unwrap(), UpdateOutcome::Applied);
            let nd = DVector::from_column_slice(n.as_slice());
            info += &nd * nd.transpose() / (sigma * sigma);
            // Measurement of n . (x - x0) equals h - n . x0.
            eta += &nd * ((h - n.dot(&x0)) / (sigma * sigma));
        }
        let cov = info.clone().try_inverse().unwrap();
        let mean = &cov * eta;
        let got = s.nominal.position() - x0;
        for k in 0..3 {
            assert!((got[k] - mean[k]).abs() < 1e-8);
            for l in 0..3 {
                assert!((s.error_covariance[(POS + k, POS + l)] - cov[(k, l)]).abs() < 1e-8);
            }
        }
    }
}
