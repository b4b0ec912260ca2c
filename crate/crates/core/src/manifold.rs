//! SO(3) / SE(3) group operations.
//!
//! Rotations are stored as unit quaternions; every public contract is stated
//! on the matrix action, so `Rotation::matrix()` is the observable value.
//!
//! Tangent conventions used across the crate:
//! - rotation vectors `phi` in radians, principal branch `|phi| <= pi`;
//! - twists are `(rho, phi)` with `rho` the translational part;
//! - perturbations are applied on the right, `T * exp(xi)`.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::ops::Mul;

/// Below this angle the exponential switches to its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Quaternion scalar part below which the rotation is treated as a half
/// turn and the axis sign is canonicalized.
const HALF_TURN_TIE: f64 = 1e-12;

/// Series threshold for the Jacobian coefficients. `(theta - sin theta) / theta^3`
/// loses all precision well before `SMALL_ANGLE`, so the switch happens earlier.
const JACOBIAN_SERIES_ANGLE: f64 = 1e-2;

/// Skew-symmetric cross-product matrix, `skew(a) * b == a x b`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation in 3D.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            q: UnitQuaternion::identity(),
        }
    }

    /// Builds a rotation from a (nearly) orthonormal matrix, projecting onto SO(3).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = Rotation3::from_matrix_eps(m, 1e-15, 100, Rotation3::identity());
        Self::from_quaternion(UnitQuaternion::from_rotation_matrix(&r))
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self {
            q: UnitQuaternion::new_normalize(q.into_inner()),
        }
    }

    /// Wraps a quaternion the caller guarantees to be unit norm.
    pub fn from_unit_unchecked(q: UnitQuaternion<f64>) -> Self {
        Self { q }
    }

    /// Quaternion coefficients `(w, x, y, z)` with `w >= 0`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn from_wxyz(wxyz: [f64; 4]) -> Self {
        Self::from_quaternion(UnitQuaternion::new_normalize(Quaternion::new(
            wxyz[0], wxyz[1], wxyz[2], wxyz[3],
        )))
    }

    /// Rotation about the world z axis.
    pub fn from_yaw(yaw: f64) -> Self {
        so3_exp(&Vector3::new(0.0, 0.0, yaw))
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Self { q: self.q.inverse() }
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self::from_quaternion(self.q * other.q)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q * v
    }

    pub fn inverse_rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q.inverse_transform_vector(v)
    }

    /// Angle of the relative rotation `self^-1 * other`, radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        so3_log(&self.inverse().compose(other)).norm()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

/// Exponential map of a rotation vector.
pub fn so3_exp(phi: &Vector3<f64>) -> Rotation {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (w, k) = if theta < SMALL_ANGLE {
        // cos(t/2) and sin(t/2)/t to second order.
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    Rotation::from_quaternion(UnitQuaternion::new_unchecked(Quaternion::new(
        w,
        k * phi.x,
        k * phi.y,
        k * phi.z,
    )))
}

/// Logarithm map onto the principal branch `|phi| <= pi`.
///
/// At exactly `pi` the axis sign is chosen so that its first nonzero
/// component is positive.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let q = r.q.quaternion();
    let (w, mut v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let s = v.norm();
    if s < SMALL_ANGLE {
        // theta ~ 2 s / w; 2 atan(s/w)/s = (2/w)(1 - s^2/(3 w^2))
        return v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w));
    }
    let theta = 2.0 * s.atan2(w);
    if w < HALF_TURN_TIE {
        let first = v.iter().copied().find(|c| *c != 0.0).unwrap_or(1.0);
        if first < 0.0 {
            v = -v;
        }
    }
    v * (theta / s)
}

fn theta_coefficients(phi: &Vector3<f64>) -> (f64, f64, f64) {
    // Returns (theta^2, (1 - cos t)/t^2, (t - sin t)/t^3).
    let t2 = phi.norm_squared();
    if t2 < JACOBIAN_SERIES_ANGLE * JACOBIAN_SERIES_ANGLE {
        (
            t2,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let t = t2.sqrt();
        (t2, (1.0 - t.cos()) / t2, (t - t.sin()) / (t2 * t))
    }
}

/// Left Jacobian of SO(3): `exp(phi + d) ~ exp(Jl(phi) d) exp(phi)`.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let (_, a, b) = theta_coefficients(phi);
    let k = skew(phi);
    Matrix3::identity() + k * a + k * k * b
}

/// Right Jacobian of SO(3): `exp(phi + d) ~ exp(phi) exp(Jr(phi) d)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian(&-phi)
}

/// `1/t^2 - (1 + cos t) / (2 t sin t)`, written with `cot(t/2)` so it stays
/// finite up to `pi`.
fn inverse_jacobian_coefficient(phi: &Vector3<f64>) -> f64 {
    let t2 = phi.norm_squared();
    if t2 < JACOBIAN_SERIES_ANGLE * JACOBIAN_SERIES_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let t = t2.sqrt();
        1.0 / t2 - 1.0 / ((0.5 * t).tan() * 2.0 * t)
    }
}

pub fn so3_left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let k = skew(phi);
    Matrix3::identity() - k * 0.5 + k * k * inverse_jacobian_coefficient(phi)
}

pub fn so3_right_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian_inverse(&-phi)
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn compose(&self, b: &Pose) -> Pose {
        compose(self, b)
    }

    pub fn inverse(&self) -> Pose {
        inverse(self)
    }

    pub fn act(&self, p: &Vector3<f64>) -> Vector3<f64> {
        act(self, p)
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        compose(&self, &rhs)
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::new(
        a.rotation.compose(&b.rotation),
        a.rotation.rotate(&b.translation) + a.translation,
    )
}

pub fn inverse(a: &Pose) -> Pose {
    let r_inv = a.rotation.inverse();
    Pose::new(r_inv, -r_inv.rotate(&a.translation))
}

pub fn act(a: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    a.rotation.rotate(p) + a.translation
}

/// Element of se(3).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

pub fn se3_exp(xi: &Twist) -> Pose {
    Pose::new(so3_exp(&xi.phi), so3_left_jacobian(&xi.phi) * xi.rho)
}

pub fn se3_log(t: &Pose) -> Twist {
    let phi = so3_log(&t.rotation);
    Twist::new(so3_left_jacobian_inverse(&phi) * t.translation, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> Rotation {
        // Marsaglia-style: normalized 4D Gaussian is uniform on S^3.
        let normal = rand_distr::StandardNormal;
        let v: [f64; 4] = [
            rng.sample(normal),
            rng.sample(normal),
            rng.sample(normal),
            rng.sample(normal),
        ];
        Rotation::from_wxyz(v)
    }

    fn orthonormality_error(r: &Rotation) -> f64 {
        let m = r.matrix();
        (m.transpose() * m - Matrix3::identity()).norm()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(so3_exp(&Vector3::zeros()).matrix(), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let m = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0)).matrix();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((m - expected).abs().max() < 1e-15, "{m}");
    }

    #[test]
    fn log_identity_and_half_turn() {
        assert_eq!(so3_log(&Rotation::identity()), Vector3::zeros());
        let half_x = Rotation::from_matrix(&Matrix3::new(
            1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0,
        ));
        let phi = so3_log(&half_x);
        assert!((phi - Vector3::new(PI, 0.0, 0.0)).norm() < 1e-12, "{phi}");
        // Same rotation reached with the opposite axis still logs to +x.
        let neg = so3_exp(&Vector3::new(-PI, 0.0, 0.0));
        let phi = so3_log(&neg);
        assert!((phi - Vector3::new(PI, 0.0, 0.0)).norm() < 1e-12, "{phi}");
    }

    #[test]
    fn exp_log_roundtrip_on_random_quaternions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let r = random_unit_quaternion(&mut rng);
            let back = so3_exp(&so3_log(&r));
            worst = worst.max((back.matrix() - r.matrix()).abs().max());
        }
        assert!(worst < 1e-10, "worst {worst}");
    }

    #[test]
    fn tiny_angles_use_series_consistently() {
        for scale in [1e-12, 1e-9, 5e-9, 2e-8, 1e-6] {
            let phi = Vector3::new(0.3, -0.5, 0.8) * scale;
            let back = so3_log(&so3_exp(&phi));
            assert!((back - phi).norm() <= 1e-12 * scale.max(1e-12) + 1e-22);
        }
    }

    #[test]
    fn se3_basic_cases() {
        let id = se3_exp(&Twist::zero());
        assert_eq!(id.translation, Vector3::zeros());
        assert_eq!(id.rotation.matrix(), Matrix3::identity());
        let t = se3_exp(&Twist::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()));
        assert_eq!(t.translation, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.rotation.matrix(), Matrix3::identity());
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let phi = Vector3::from_fn(|_, _| rng.gen_range(-1.8..1.8));
            let jl = so3_left_jacobian(&phi);
            let base_inv = so3_exp(&phi).inverse();
            let mut fd = Matrix3::zeros();
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                let plus = so3_log(&so3_exp(&(phi + d)).compose(&base_inv));
                let minus = so3_log(&so3_exp(&(phi - d)).compose(&base_inv));
                fd.set_column(k, &((plus - minus) / (2.0 * h)));
            }
            let rel = (fd - jl).norm() / jl.norm();
            assert!(rel < 1e-6, "rel {rel}");
        }
    }

    #[test]
    fn jacobian_inverses() {
        for phi in [
            Vector3::new(1e-9, 0.0, 0.0),
            Vector3::new(0.004, -0.002, 0.001),
            Vector3::new(0.7, 0.2, -1.1),
            Vector3::new(0.0, 3.0, 0.0),
        ] {
            let e = so3_right_jacobian(&phi) * so3_right_jacobian_inverse(&phi) - Matrix3::identity();
            assert!(e.abs().max() < 1e-12, "{phi} {e}");
            let e = so3_left_jacobian(&phi) * so3_left_jacobian_inverse(&phi) - Matrix3::identity();
            assert!(e.abs().max() < 1e-12, "{phi} {e}");
        }
    }

    #[test]
    fn group_axioms() {
        let a = se3_exp(&Twist::new(Vector3::new(1.0, 2.0, -0.5), Vector3::new(0.3, -0.2, 1.0)));
        let id = a.compose(&a.inverse());
        assert!(id.translation.norm() < 1e-12);
        assert!((id.rotation.matrix() - Matrix3::identity()).abs().max() < 1e-12);
        let p = Vector3::new(0.4, -3.0, 2.0);
        assert_eq!(act(&Pose::identity(), &p), p);
    }

    fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
        prop::array::uniform3(-range..range).prop_map(Vector3::from)
    }

    proptest! {
        #[test]
        fn rotations_stay_orthonormal(a in vec3(3.0), b in vec3(3.0), c in vec3(3.0)) {
            let r = so3_exp(&a).compose(&so3_exp(&b)).compose(&so3_exp(&c)).inverse();
            prop_assert!(orthonormality_error(&r) < 1e-12);
            let det = r.matrix().determinant();
            prop_assert!((det - 1.0).abs() < 1e-12);
        }

        #[test]
        fn so3_roundtrip(phi in vec3(1.8)) {
            prop_assume!(phi.norm() < PI - 1e-6);
            let back = so3_log(&so3_exp(&phi));
            prop_assert!((back - phi).abs().max() < 1e-12);
        }

        #[test]
        fn se3_roundtrip(rho in vec3(10.0), phi in vec3(1.8)) {
            prop_assume!(phi.norm() <= PI - 1e-6);
            let xi = Twist::new(rho, phi);
            let back = se3_log(&se3_exp(&xi));
            prop_assert!((back.rho - rho).abs().max() < 1e-10);
            prop_assert!((back.phi - phi).abs().max() < 1e-10);
        }

        #[test]
        fn composition_is_associative(
            r1 in vec3(10.0), p1 in vec3(3.0),
            r2 in vec3(10.0), p2 in vec3(3.0),
            r3 in vec3(10.0), p3 in vec3(3.0),
        ) {
            let a = se3_exp(&Twist::new(r1, p1));
            let b = se3_exp(&Twist::new(r2, p2));
            let c = se3_exp(&Twist::new(r3, p3));
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.translation - right.translation).abs().max() < 1e-12 * 10.0);
            prop_assert!((left.rotation.matrix() - right.rotation.matrix()).abs().max() < 1e-12);
        }
    }
}
