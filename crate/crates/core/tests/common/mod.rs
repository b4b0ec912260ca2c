//! Continuous-time IMU oracle shared by the pre-integration tests.
#![allow(dead_code)]

use indoor_fusion::manifold::Rotation;
use indoor_fusion::preintegration::{ImuBias, ImuNoise, ImuSample, PreintegratedImu};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Sum-of-sinusoids signal with exact interval averages.
pub struct Signal {
    offset: Vector3<f64>,
    terms: Vec<[(f64, f64, f64); 3]>,
}

impl Signal {
    pub fn random(rng: &mut ChaCha8Rng, offset: Vector3<f64>, amplitude: f64) -> Self {
        let terms = (0..3)
            .map(|_| {
                [0, 1, 2].map(|_| {
                    (
                        rng.gen_range(-amplitude..amplitude),
                        rng.gen_range(0.3..2.0),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
            })
            .collect();
        Self { offset, terms }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        let mut v = self.offset;
        for term in &self.terms {
            for (k, (a, f, p)) in term.iter().enumerate() {
                v[k] += a * (f * t + p).sin();
            }
        }
        v
    }

    pub fn average(&self, t0: f64, t1: f64) -> Vector3<f64> {
        let mut v = self.offset;
        for term in &self.terms {
            for (k, (a, f, p)) in term.iter().enumerate() {
                v[k] += a * ((f * t0 + p).cos() - (f * t1 + p).cos()) / (f * (t1 - t0));
            }
        }
        v
    }
}

/// Fourth-order Runge-Kutta on (q, v, p) with body-frame rates.
pub fn rk4(gyro: &Signal, accel: &Signal, duration: f64, hz: f64) -> (Rotation, Vector3<f64>, Vector3<f64>) {
    type S = (Quaternion<f64>, Vector3<f64>, Vector3<f64>);
    let deriv = |t: f64, s: &S| -> S {
        let w = gyro.at(t);
        let qdot = s.0 * Quaternion::new(0.0, w.x, w.y, w.z) * 0.5;
        let r = UnitQuaternion::new_normalize(s.0);
        (qdot, r * accel.at(t), s.1)
    };
    let add = |s: &S, d: &S, h: f64| -> S { (s.0 + d.0 * h, s.1 + d.1 * h, s.2 + d.2 * h) };
    let steps = (duration * hz).round() as usize;
    let h = 1.0 / hz;
    let mut s: S = (Quaternion::identity(), Vector3::zeros(), Vector3::zeros());
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = deriv(t, &s);
        let k2 = deriv(t + h / 2.0, &add(&s, &k1, h / 2.0));
        let k3 = deriv(t + h / 2.0, &add(&s, &k2, h / 2.0));
        let k4 = deriv(t + h, &add(&s, &k3, h));
        s.0 += (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * (h / 6.0);
        s.1 += (k1.1 + k2.1 * 2.0 + k3.1 * 2.0 + k4.1) * (h / 6.0);
        s.2 += (k1.2 + k2.2 * 2.0 + k3.2 * 2.0 + k4.2) * (h / 6.0);
        s.0 = s.0.normalize();
    }
    (Rotation::from_quaternion(UnitQuaternion::new_normalize(s.0)), s.1, s.2)
}

pub fn preintegrate(gyro: &Signal, accel: &Signal, duration: f64, hz: f64, averaged: bool) -> PreintegratedImu {
    let mut pre = PreintegratedImu::new(ImuBias::default(), ImuNoise::default());
    let dt = 1.0 / hz;
    for k in 0..(duration * hz).round() as usize {
        let t = k as f64 * dt;
        let (w, a) = if averaged {
            (gyro.average(t, t + dt), accel.average(t, t + dt))
        } else {
            (gyro.at(t), accel.at(t))
        };
        pre.push(&ImuSample { t, accel: a, gyro: w }, dt).unwrap();
    }
    pre
}

impl Signal {
    pub fn constant(offset: Vector3<f64>) -> Self {
        Self { offset, terms: Vec::new() }
    }
}
