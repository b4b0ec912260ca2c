//! IMU pre-integration between keyframes.
//!
//! Samples are zero-order held: a sample stamped `t_k` applies over
//! `[t_k, t_k + dt)`. Increments are expressed in the body frame of the first
//! keyframe and are independent of its absolute pose and velocity.

use crate::error::{FusionError, Result};
use crate::manifold::{
    skew, so3_exp, so3_log, so3_right_jacobian, so3_right_jacobian_inverse, Pose, Rotation, Twist,
};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Vector9 = SVector<f64, 9>;
pub type Matrix9x15 = SMatrix<f64, 9, 15>;
pub type Vector15 = SVector<f64, 15>;

/// Offsets of each block inside the 15-dim state tangent `(dtheta, dp, dv, dbg, dba)`.
pub mod tangent {
    pub const ROT: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
    pub const DIM: usize = 15;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame, m/s^2.
    pub accel: Vector3<f64>,
    /// Angular rate in the body frame, rad/s.
    pub gyro: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImuBias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuBias {
    pub fn new(gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { gyro, accel }
    }
}

/// Continuous-time IMU noise densities used for covariance propagation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    /// rad/s/sqrt(Hz)
    pub gyro_noise_density: f64,
    /// m/s^2/sqrt(Hz)
    pub accel_noise_density: f64,
    /// rad/s^2/sqrt(Hz)
    pub gyro_bias_random_walk: f64,
    /// m/s^3/sqrt(Hz)
    pub accel_bias_random_walk: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            gyro_noise_density: 1e-3,
            accel_noise_density: 1e-2,
            gyro_bias_random_walk: 1e-5,
            accel_bias_random_walk: 1e-4,
        }
    }
}

/// Full estimation state of one keyframe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub pose: Pose,
    /// World-frame velocity, m/s.
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
}

impl NavState {
    pub fn new(pose: Pose, velocity: Vector3<f64>, bias: ImuBias) -> Self {
        Self {
            pose,
            velocity,
            bias,
        }
    }

    pub fn rotation(&self) -> &Rotation {
        &self.pose.rotation
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.pose.translation
    }

    /// Applies a tangent increment: pose by `T * exp(xi)`, everything else additively.
    pub fn retract(&self, delta: &Vector15) -> NavState {
        let xi = Twist::new(
            delta.fixed_rows::<3>(tangent::POS).into_owned(),
            delta.fixed_rows::<3>(tangent::ROT).into_owned(),
        );
        NavState {
            pose: self.pose.compose(&crate::manifold::se3_exp(&xi)),
            velocity: self.velocity + delta.fixed_rows::<3>(tangent::VEL),
            bias: ImuBias {
                gyro: self.bias.gyro + delta.fixed_rows::<3>(tangent::BG),
                accel: self.bias.accel + delta.fixed_rows::<3>(tangent::BA),
            },
        }
    }

    /// Local coordinates of `other` around `self`:
    /// `(log(R^T R'), R^T (p' - p), v' - v, bg' - bg, ba' - ba)`.
    pub fn local(&self, other: &NavState) -> Vector15 {
        let r = self.rotation();
        let mut out = Vector15::zeros();
        out.fixed_rows_mut::<3>(tangent::ROT)
            .copy_from(&so3_log(&r.inverse().compose(other.rotation())));
        out.fixed_rows_mut::<3>(tangent::POS)
            .copy_from(&r.inverse_rotate(&(other.position() - self.position())));
        out.fixed_rows_mut::<3>(tangent::VEL)
            .copy_from(&(other.velocity - self.velocity));
        out.fixed_rows_mut::<3>(tangent::BG)
            .copy_from(&(other.bias.gyro - self.bias.gyro));
        out.fixed_rows_mut::<3>(tangent::BA)
            .copy_from(&(other.bias.accel - self.bias.accel));
        out
    }

    /// Jacobian of `self.local(other)` with respect to a right perturbation of `other`.
    pub fn local_jacobian(&self, other: &NavState) -> SMatrix<f64, 15, 15> {
        let rel = self.rotation().inverse().compose(other.rotation());
        let mut j = SMatrix::<f64, 15, 15>::identity();
        j.fixed_view_mut::<3, 3>(tangent::ROT, tangent::ROT)
            .copy_from(&so3_right_jacobian_inverse(&so3_log(&rel)));
        j.fixed_view_mut::<3, 3>(tangent::POS, tangent::POS)
            .copy_from(&rel.matrix());
        j
    }
}

/// Relative-motion increment accumulated between two keyframes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreintegratedImu {
    pub delta_r: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub dt_total: f64,
    pub bias_lin_point: ImuBias,
    /// Covariance over `(dtheta, dv, dp)`.
    pub covariance: Matrix9,
    pub d_r_d_bg: Matrix3<f64>,
    pub d_v_d_bg: Matrix3<f64>,
    pub d_v_d_ba: Matrix3<f64>,
    pub d_p_d_bg: Matrix3<f64>,
    pub d_p_d_ba: Matrix3<f64>,
    pub noise: ImuNoise,
}

impl PreintegratedImu {
    pub fn new(bias_lin_point: ImuBias, noise: ImuNoise) -> Self {
        Self {
            delta_r: Rotation::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
            dt_total: 0.0,
            bias_lin_point,
            covariance: Matrix9::zeros(),
            d_r_d_bg: Matrix3::zeros(),
            d_v_d_bg: Matrix3::zeros(),
            d_v_d_ba: Matrix3::zeros(),
            d_p_d_bg: Matrix3::zeros(),
            d_p_d_ba: Matrix3::zeros(),
            noise,
        }
    }

    /// Returns a copy with one more sample held for `dt` seconds.
    pub fn integrate(&self, sample: &ImuSample, dt: f64) -> Result<PreintegratedImu> {
        let mut out = self.clone();
        out.push(sample, dt)?;
        Ok(out)
    }

    pub fn push(&mut self, sample: &ImuSample, dt: f64) -> Result<()> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(FusionError::InvalidTimestep(dt));
        }
        let omega = sample.gyro - self.bias_lin_point.gyro;
        let acc = sample.accel - self.bias_lin_point.accel;
        let dr_old = self.delta_r.matrix();
        let step = so3_exp(&(omega * dt));
        let step_t = step.matrix().transpose();
        let jr = so3_right_jacobian(&(omega * dt));
        let acc_hat = skew(&acc);
        let dt2 = dt * dt;

        // Error-state transition over (dtheta, dv, dp).
        let mut a = Matrix9::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_t);
        a.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-dr_old * acc_hat * dt));
        a.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-0.5 * dr_old * acc_hat * dt2));
        a.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt));
        let mut b_g = SMatrix::<f64, 9, 3>::zeros();
        b_g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        let mut b_a = SMatrix::<f64, 9, 3>::zeros();
        b_a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(dr_old * dt));
        b_a.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(0.5 * dr_old * dt2));
        let var_g = self.noise.gyro_noise_density.powi(2) / dt;
        let var_a = self.noise.accel_noise_density.powi(2) / dt;
        let cov = a * self.covariance * a.transpose()
            + b_g * b_g.transpose() * var_g
            + b_a * b_a.transpose() * var_a;
        self.covariance = 0.5 * (cov + cov.transpose());

        // Bias Jacobians; position terms use the pre-update velocity/rotation.
        self.d_p_d_ba += self.d_v_d_ba * dt - 0.5 * dr_old * dt2;
        self.d_p_d_bg += self.d_v_d_bg * dt - 0.5 * dr_old * acc_hat * self.d_r_d_bg * dt2;
        self.d_v_d_ba -= dr_old * dt;
        self.d_v_d_bg -= dr_old * acc_hat * self.d_r_d_bg * dt;
        self.d_r_d_bg = step_t * self.d_r_d_bg - jr * dt;

        let rotated = dr_old * acc;
        self.delta_p += self.delta_v * dt + 0.5 * rotated * dt2;
        self.delta_v += rotated * dt;
        self.delta_r = self.delta_r.compose(&step);
        self.dt_total += dt;
        Ok(())
    }

    /// Integrates the zero-order-held stream over `[t0, t1)`.
    ///
    /// A sample covers the span up to the next sample's timestamp; the last
    /// sample before `t1` covers the remainder.
    pub fn integrate_interval(
        &mut self,
        samples: &[ImuSample],
        t0: f64,
        t1: f64,
    ) -> Result<()> {
        const EPS: f64 = 1e-9;
        for (k, s) in samples.iter().enumerate() {
            let start = s.t.max(t0);
            let next = samples.get(k + 1).map_or(f64::INFINITY, |n| n.t);
            let end = next.min(t1);
            if end - start > EPS {
                self.push(s, end - start)?;
            }
        }
        Ok(())
    }

    /// Bias-corrected increments at `bias`, to first order.
    pub fn corrected(&self, bias: &ImuBias) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let dbg = bias.gyro - self.bias_lin_point.gyro;
        let dba = bias.accel - self.bias_lin_point.accel;
        let r = self.delta_r.compose(&so3_exp(&(self.d_r_d_bg * dbg)));
        let v = self.delta_v + self.d_v_d_bg * dbg + self.d_v_d_ba * dba;
        let p = self.delta_p + self.d_p_d_bg * dbg + self.d_p_d_ba * dba;
        (r, v, p)
    }
}

/// Propagates `state_i` through the pre-integrated increment.
pub fn predict(state_i: &NavState, pre: &PreintegratedImu, gravity: &Vector3<f64>) -> NavState {
    let (dr, dv, dp) = pre.corrected(&state_i.bias);
    let dt = pre.dt_total;
    let r_i = state_i.rotation();
    let p_i = state_i.position();
    let v_i = state_i.velocity;
    NavState {
        pose: Pose::new(
            r_i.compose(&dr),
            p_i + v_i * dt + 0.5 * gravity * dt * dt + r_i.rotate(&dp),
        ),
        velocity: v_i + gravity * dt + r_i.rotate(&dv),
        bias: state_i.bias,
    }
}

/// Stacked `(rotation, velocity, position)` residual, rotation and
/// translational rows expressed in the body frame of `state_i`.
pub fn residual(
    state_i: &NavState,
    state_j: &NavState,
    pre: &PreintegratedImu,
    gravity: &Vector3<f64>,
) -> Vector9 {
    residual_and_jacobians(state_i, state_j, pre, gravity).0
}

/// Residual plus Jacobians with respect to the 15-dim right-perturbation
/// tangent of each state.
pub fn residual_and_jacobians(
    state_i: &NavState,
    state_j: &NavState,
    pre: &PreintegratedImu,
    gravity: &Vector3<f64>,
) -> (Vector9, Matrix9x15, Matrix9x15) {
    use tangent::*;
    let dt = pre.dt_total;
    let dbg = state_i.bias.gyro - pre.bias_lin_point.gyro;
    let (dr, dv, dp) = pre.corrected(&state_i.bias);

    let r_i = state_i.rotation();
    let r_j = state_j.rotation();
    let ri_t = r_i.matrix().transpose();

    let rel = dr.inverse().compose(&r_i.inverse()).compose(r_j);
    let r_rot = so3_log(&rel);
    let vel_world = state_j.velocity - state_i.velocity - gravity * dt;
    let pos_world =
        state_j.position() - state_i.position() - state_i.velocity * dt - 0.5 * gravity * dt * dt;
    let vel_body = ri_t * vel_world;
    let pos_body = ri_t * pos_world;

    let mut r = Vector9::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    r.fixed_rows_mut::<3>(3).copy_from(&(vel_body - dv));
    r.fixed_rows_mut::<3>(6).copy_from(&(pos_body - dp));

    let jr_inv = so3_right_jacobian_inverse(&r_rot);
    let mut ji = Matrix9x15::zeros();
    let mut jj = Matrix9x15::zeros();

    // Rotation row.
    let rel_ji = r_j.matrix().transpose() * r_i.matrix();
    ji.fixed_view_mut::<3, 3>(0, ROT).copy_from(&(-jr_inv * rel_ji));
    jj.fixed_view_mut::<3, 3>(0, ROT).copy_from(&jr_inv);
    let bias_rot = pre.d_r_d_bg * dbg;
    let d_rot_d_bg = -jr_inv
        * so3_exp(&r_rot).matrix().transpose()
        * so3_right_jacobian(&bias_rot)
        * pre.d_r_d_bg;
    ji.fixed_view_mut::<3, 3>(0, BG).copy_from(&d_rot_d_bg);

    // Velocity row.
    ji.fixed_view_mut::<3, 3>(3, ROT).copy_from(&skew(&vel_body));
    ji.fixed_view_mut::<3, 3>(3, VEL).copy_from(&(-ri_t));
    ji.fixed_view_mut::<3, 3>(3, BG).copy_from(&(-pre.d_v_d_bg));
    ji.fixed_view_mut::<3, 3>(3, BA).copy_from(&(-pre.d_v_d_ba));
    jj.fixed_view_mut::<3, 3>(3, VEL).copy_from(&ri_t);

    // Position row.
    ji.fixed_view_mut::<3, 3>(6, ROT).copy_from(&skew(&pos_body));
    ji.fixed_view_mut::<3, 3>(6, POS)
        .copy_from(&(-Matrix3::identity()));
    ji.fixed_view_mut::<3, 3>(6, VEL).copy_from(&(-ri_t * dt));
    ji.fixed_view_mut::<3, 3>(6, BG).copy_from(&(-pre.d_p_d_bg));
    ji.fixed_view_mut::<3, 3>(6, BA).copy_from(&(-pre.d_p_d_ba));
    jj.fixed_view_mut::<3, 3>(6, POS).copy_from(&rel_ji.transpose());

    (r, ji, jj)
}
