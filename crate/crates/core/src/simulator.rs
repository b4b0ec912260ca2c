//! Seeded scenario simulator: ground truth plus IMU, TDoA, ultrasonic and
//! floor streams.

use crate::error::{FusionError, Result};
use crate::manifold::{so3_log, Pose, Rotation};
use crate::optimizer::EngineConfig;
use crate::preintegration::{ImuSample, NavState};
use crate::tdoa::{AnchorId, AnchorSet, TdoaMeasurement, UltrasonicRange};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rates {
    pub imu_hz: f64,
    pub uwb_hz: f64,
    pub us_hz: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            imu_hz: 200.0,
            uwb_hz: 20.0,
            us_hz: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// meters
    pub tdoa_sigma: f64,
    pub ultrasonic_sigma: f64,
    pub accel_noise_density: f64,
    pub gyro_noise_density: f64,
    pub accel_bias_random_walk: f64,
    pub gyro_bias_random_walk: f64,
    pub initial_accel_bias: Vector3<f64>,
    pub initial_gyro_bias: Vector3<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            tdoa_sigma: 0.10,
            ultrasonic_sigma: 0.02,
            accel_noise_density: 1e-2,
            gyro_noise_density: 1e-3,
            accel_bias_random_walk: 1e-4,
            gyro_bias_random_walk: 1e-5,
            initial_accel_bias: Vector3::zeros(),
            initial_gyro_bias: Vector3::zeros(),
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            tdoa_sigma: 0.0,
            ultrasonic_sigma: 0.0,
            accel_noise_density: 0.0,
            gyro_noise_density: 0.0,
            accel_bias_random_walk: 0.0,
            gyro_bias_random_walk: 0.0,
            initial_accel_bias: Vector3::zeros(),
            initial_gyro_bias: Vector3::zeros(),
        }
    }
}

/// Closed axis-aligned obstacle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlosBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    /// Mean of the exponential range bias, meters; falls back to the scenario default.
    #[serde(default)]
    pub bias_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlosSettings {
    pub enabled: bool,
    pub bias_mean: f64,
    pub boxes: Vec<NlosBox>,
}

impl Default for NlosSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            bias_mean: 0.5,
            boxes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UwbSettings {
    pub anchors: Vec<Vector3<f64>>,
    #[serde(default)]
    pub reference: AnchorId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UltrasonicSettings {
    pub anchors: Vec<Vector3<f64>>,
    /// meters
    pub max_range: f64,
}

impl Default for UltrasonicSettings {
    fn default() -> Self {
        Self {
            anchors: Vec::new(),
            max_range: 8.0,
        }
    }
}

/// A level the tag can stand on; `height` is the tag's z while on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Floor {
    pub z_min: f64,
    pub z_max: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub position: Vector3<f64>,
    /// radians
    #[serde(default)]
    pub yaw: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    #[serde(default = "one")]
    pub packet_reception_rate: f64,
    #[serde(default)]
    pub rates: Rates,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub nlos: NlosSettings,
    pub uwb: UwbSettings,
    #[serde(default)]
    pub ultrasonic: UltrasonicSettings,
    #[serde(default)]
    pub floors: Vec<Floor>,
    pub bounds: Bounds,
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub engine: EngineConfig,
}

fn one() -> f64 {
    1.0
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| FusionError::Toml(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn uwb_anchors(&self) -> Result<AnchorSet> {
        let ids = (0..self.uwb.anchors.len() as AnchorId).collect();
        AnchorSet::new(ids, self.uwb.anchors.clone(), self.uwb.reference)
    }

    pub fn ultrasonic_anchors(&self) -> Result<AnchorSet> {
        let n = self.ultrasonic.anchors.len() as AnchorId;
        AnchorSet::new((0..n).collect(), self.ultrasonic.anchors.clone(), 0)
            .or_else(|_| Ok(AnchorSet::from_positions(Vec::new())))
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.rates.imu_hz, self.rates.uwb_hz, self.rates.us_hz];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(FusionError::Scenario("rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.packet_reception_rate) {
            return Err(FusionError::Scenario(format!(
                "packet_reception_rate {} outside [0, 1]",
                self.packet_reception_rate
            )));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(FusionError::Scenario("duration must be positive".into()));
        }
        let n = &self.noise;
        let sigmas = [
            n.tdoa_sigma,
            n.ultrasonic_sigma,
            n.accel_noise_density,
            n.gyro_noise_density,
            n.accel_bias_random_walk,
            n.gyro_bias_random_walk,
            self.nlos.bias_mean,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(FusionError::Scenario("noise parameters must be non-negative".into()));
        }
        if self.uwb.anchors.len() < 4 {
            return Err(FusionError::Scenario("need at least 4 UWB anchors".into()));
        }
        self.uwb_anchors()?;
        if self.waypoints.is_empty() {
            return Err(FusionError::InfeasibleTrajectory("no waypoints".into()));
        }
        for w in self.waypoints.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(FusionError::InfeasibleTrajectory(format!(
                    "waypoint times {} and {} are not increasing",
                    w[0].t, w[1].t
                )));
            }
        }
        for w in &self.waypoints {
            let p = &w.position;
            let inside = (0..3).all(|k| p[k] >= self.bounds.min[k] && p[k] <= self.bounds.max[k]);
            if !inside {
                return Err(FusionError::InfeasibleTrajectory(format!(
                    "waypoint at t={} lies outside the bounds",
                    w.t
                )));
            }
        }
        self.engine.validate()
    }
}

/// Clamped cubic spline with zero end slopes; constant outside the knots.
#[derive(Clone, Debug)]
pub struct CubicSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl CubicSpline {
    pub fn new(knots: &[f64], values: &[f64]) -> Self {
        let n = knots.len();
        let mut second = vec![0.0; n];
        if n >= 2 {
            // Tridiagonal system for the knot second derivatives (Thomas algorithm).
            let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
            let mut diag = vec![0.0; n];
            let mut upper = vec![0.0; n];
            let mut lower = vec![0.0; n];
            let mut rhs = vec![0.0; n];
            diag[0] = 2.0 * h[0];
            upper[0] = h[0];
            rhs[0] = 6.0 * (values[1] - values[0]) / h[0];
            for i in 1..n - 1 {
                lower[i] = h[i - 1];
                diag[i] = 2.0 * (h[i - 1] + h[i]);
                upper[i] = h[i];
                rhs[i] = 6.0 * ((values[i + 1] - values[i]) / h[i] - (values[i] - values[i - 1]) / h[i - 1]);
            }
            lower[n - 1] = h[n - 2];
            diag[n - 1] = 2.0 * h[n - 2];
            rhs[n - 1] = -6.0 * (values[n - 1] - values[n - 2]) / h[n - 2];
            for i in 1..n {
                let w = lower[i] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            second[n - 1] = rhs[n - 1] / diag[n - 1];
            for i in (0..n - 1).rev() {
                second[i] = (rhs[i] - upper[i] * second[i + 1]) / diag[i];
            }
        }
        Self {
            knots: knots.to_vec(),
            values: values.to_vec(),
            second,
        }
    }

    /// Value, first and second derivative at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let n = self.knots.len();
        if n == 1 || t <= self.knots[0] {
            return (self.values[0], 0.0, 0.0);
        }
        if t >= self.knots[n - 1] {
            return (self.values[n - 1], 0.0, 0.0);
        }
        let i = self.knots.partition_point(|&k| k <= t) - 1;
        let h = self.knots[i + 1] - self.knots[i];
        let a = (self.knots[i + 1] - t) / h;
        let b = (t - self.knots[i]) / h;
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let value = y0 + b * (y1 - y0) + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let slope = (y1 - y0) / h + (-(3.0 * a * a - 1.0) * m0 + (3.0 * b * b - 1.0) * m1) * h / 6.0;
        let curvature = a * m0 + b * m1;
        (value, slope, curvature)
    }
}

/// Quintic smoothstep between consecutive knots: zero slope and curvature at
/// every knot, so equal neighbouring values give an exactly flat segment.
#[derive(Clone, Debug)]
pub struct SmoothStep {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl SmoothStep {
    pub fn new(knots: &[f64], values: &[f64]) -> Self {
        Self {
            knots: knots.to_vec(),
            values: values.to_vec(),
        }
    }

    /// Value, first and second derivative at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let n = self.knots.len();
        if n == 1 || t <= self.knots[0] {
            return (self.values[0], 0.0, 0.0);
        }
        if t >= self.knots[n - 1] {
            return (self.values[n - 1], 0.0, 0.0);
        }
        let i = self.knots.partition_point(|&k| k <= t) - 1;
        let h = self.knots[i + 1] - self.knots[i];
        let u = (t - self.knots[i]) / h;
        let dy = self.values[i + 1] - self.values[i];
        let s = u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
        let ds = 30.0 * u * u * (1.0 - u) * (1.0 - u);
        let dds = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u);
        (self.values[i] + dy * s, dy * ds / h, dy * dds / (h * h))
    }
}

/// Horizontal axes and yaw follow clamped cubic splines; height follows
/// [`SmoothStep`], so the tag stays level between waypoints of equal height.
#[derive(Clone, Debug)]
pub struct Trajectory {
    horizontal: [CubicSpline; 2],
    vertical: SmoothStep,
    yaw: CubicSpline,
}

impl Trajectory {
    pub fn new(waypoints: &[Waypoint]) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(FusionError::InfeasibleTrajectory("no waypoints".into()));
        }
        for w in waypoints.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(FusionError::InfeasibleTrajectory(format!(
                    "waypoint times {} and {} are not increasing",
                    w[0].t, w[1].t
                )));
            }
        }
        let t: Vec<f64> = waypoints.iter().map(|w| w.t).collect();
        let axis = |k: usize| -> Vec<f64> { waypoints.iter().map(|w| w.position[k]).collect() };
        // Missing yaws hold the previous value; the sequence is unwrapped.
        let mut yaws = Vec::with_capacity(waypoints.len());
        let mut last = 0.0;
        for w in waypoints {
            let mut y = w.yaw.unwrap_or(last);
            while y - last > std::f64::consts::PI {
                y -= 2.0 * std::f64::consts::PI;
            }
            while y - last < -std::f64::consts::PI {
                y += 2.0 * std::f64::consts::PI;
            }
            yaws.push(y);
            last = y;
        }
        Ok(Self {
            horizontal: [CubicSpline::new(&t, &axis(0)), CubicSpline::new(&t, &axis(1))],
            vertical: SmoothStep::new(&t, &axis(2)),
            yaw: CubicSpline::new(&t, &yaws),
        })
    }

    fn axes(&self, t: f64) -> [(f64, f64, f64); 3] {
        [self.horizontal[0].eval(t), self.horizontal[1].eval(t), self.vertical.eval(t)]
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let a = self.axes(t);
        Vector3::new(a[0].0, a[1].0, a[2].0)
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        let a = self.axes(t);
        Vector3::new(a[0].1, a[1].1, a[2].1)
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        let a = self.axes(t);
        Vector3::new(a[0].2, a[1].2, a[2].2)
    }

    pub fn rotation(&self, t: f64) -> Rotation {
        Rotation::from_yaw(self.yaw.eval(t).0)
    }

    pub fn state(&self, t: f64) -> NavState {
        NavState {
            pose: Pose::new(self.rotation(t), self.position(t)),
            velocity: self.velocity(t),
            bias: Default::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
}

/// The tag is known to stand on a floor at `height` (world z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorObservation {
    pub t: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Measurement {
    Imu(ImuSample),
    Tdoa(TdoaMeasurement),
    Ultrasonic(UltrasonicRange),
    Floor(FloorObservation),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Streams {
    pub imu: Vec<ImuSample>,
    pub tdoa: Vec<TdoaMeasurement>,
    pub ultrasonic: Vec<UltrasonicRange>,
    pub floors: Vec<FloorObservation>,
    /// UWB epoch times, one keyframe each, whether or not packets arrived.
    pub uwb_epochs: Vec<f64>,
    pub packets_sent: usize,
    pub packets_kept: usize,
}

impl Streams {
    pub fn reception_achieved(&self) -> f64 {
        if self.packets_sent == 0 {
            1.0
        } else {
            self.packets_kept as f64 / self.packets_sent as f64
        }
    }

    /// Every measurement merged in timestamp order; ties keep sensor order
    /// IMU, TDoA, ultrasonic, floor.
    pub fn merged(&self) -> Vec<Measurement> {
        let mut out: Vec<(f64, u8, usize, Measurement)> = Vec::new();
        out.extend(self.imu.iter().enumerate().map(|(k, m)| (m.t, 0, k, Measurement::Imu(*m))));
        out.extend(self.tdoa.iter().enumerate().map(|(k, m)| (m.t, 1, k, Measurement::Tdoa(*m))));
        out.extend(
            self.ultrasonic
                .iter()
                .enumerate()
                .map(|(k, m)| (m.t, 2, k, Measurement::Ultrasonic(*m))),
        );
        out.extend(self.floors.iter().enumerate().map(|(k, m)| (m.t, 3, k, Measurement::Floor(*m))));
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        out.into_iter().map(|x| x.3).collect()
    }
}

/// Segment `p`-`a` against a closed box, slab method. Touching counts as blocked.
pub fn segment_hits_box(p: &Vector3<f64>, a: &Vector3<f64>, b: &NlosBox) -> bool {
    let d = a - p;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for k in 0..3 {
        if d[k] == 0.0 {
            if p[k] < b.min[k] || p[k] > b.max[k] {
                return false;
            }
        } else {
            let t1 = (b.min[k] - p[k]) / d[k];
            let t2 = (b.max[k] - p[k]) / d[k];
            lo = lo.max(t1.min(t2));
            hi = hi.min(t1.max(t2));
            if lo > hi {
                return false;
            }
        }
    }
    true
}

/// True when the straight path from `p` to `anchor` clears every box.
pub fn los_check(p: &Vector3<f64>, anchor: &Vector3<f64>, boxes: &[NlosBox]) -> bool {
    !boxes.iter().any(|b| segment_hits_box(p, anchor, b))
}

/// Substream ids; one per random source so sources stay independent.
mod stream {
    pub const IMU: u64 = 1;
    pub const UWB_NOISE: u64 = 2;
    pub const NLOS: u64 = 3;
    pub const UWB_LOSS: u64 = 4;
    pub const US_NOISE: u64 = 5;
    pub const US_LOSS: u64 = 6;
    pub const BIAS: u64 = 7;
}

fn rng_for(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    Vector3::new(gaussian(rng, sigma), gaussian(rng, sigma), gaussian(rng, sigma))
}

/// Sample times `k / hz` for `k = 0..` up to and including `duration`.
fn epochs(hz: f64, duration: f64) -> Vec<f64> {
    let n = (duration * hz + 1e-9).floor() as usize;
    (0..=n).map(|k| k as f64 / hz).collect()
}

pub fn synthesize(scn: &Scenario) -> Result<(Vec<TruthSample>, Streams)> {
    scn.validate()?;
    let traj = Trajectory::new(&scn.waypoints)?;
    let anchors = scn.uwb_anchors()?;
    let g = scn.engine.gravity;
    let noise = &scn.noise;

    let imu_times = epochs(scn.rates.imu_hz, scn.duration);
    let truth: Vec<TruthSample> = imu_times
        .iter()
        .map(|&t| TruthSample {
            t,
            pose: Pose::new(traj.rotation(t), traj.position(t)),
            velocity: traj.velocity(t),
        })
        .collect();

    // IMU: interval-averaged readings, so that zero-order-hold integration
    // reproduces the sampled truth.
    let mut streams = Streams::default();
    let mut imu_rng = rng_for(scn.seed, stream::IMU);
    let mut bias_rng = rng_for(scn.seed, stream::BIAS);
    let mut ba = noise.initial_accel_bias;
    let mut bg = noise.initial_gyro_bias;
    let dt = 1.0 / scn.rates.imu_hz;
    let accel_sigma = noise.accel_noise_density * scn.rates.imu_hz.sqrt();
    let gyro_sigma = noise.gyro_noise_density * scn.rates.imu_hz.sqrt();
    for k in 0..truth.len().saturating_sub(1) {
        let (s0, s1) = (&truth[k], &truth[k + 1]);
        let step = s1.t - s0.t;
        let r0 = &s0.pose.rotation;
        let gyro = if s1.pose.rotation == *r0 {
            Vector3::zeros()
        } else {
            so3_log(&r0.inverse().compose(&s1.pose.rotation)) / step
        };
        let accel = r0.inverse_rotate(&((s1.velocity - s0.velocity) / step - g));
        streams.imu.push(ImuSample {
            t: s0.t,
            accel: accel + ba + gaussian3(&mut imu_rng, accel_sigma),
            gyro: gyro + bg + gaussian3(&mut imu_rng, gyro_sigma),
        });
        ba += gaussian3(&mut bias_rng, noise.accel_bias_random_walk * dt.sqrt());
        bg += gaussian3(&mut bias_rng, noise.gyro_bias_random_walk * dt.sqrt());
    }

    // UWB TDoA against the reference anchor.
    let mut uwb_rng = rng_for(scn.seed, stream::UWB_NOISE);
    let mut nlos_rng = rng_for(scn.seed, stream::NLOS);
    let mut uwb_loss = rng_for(scn.seed, stream::UWB_LOSS);
    let boxes: &[NlosBox] = if scn.nlos.enabled { &scn.nlos.boxes } else { &[] };
    let range_bias = |p: &Vector3<f64>, a: &Vector3<f64>, rng: &mut ChaCha8Rng| -> f64 {
        let mut mean: f64 = 0.0;
        for b in boxes {
            if segment_hits_box(p, a, b) {
                mean = mean.max(b.bias_mean.unwrap_or(scn.nlos.bias_mean));
            }
        }
        if mean > 0.0 {
            Exp::new(1.0 / mean).expect("positive rate").sample(rng)
        } else {
            0.0
        }
    };
    let a_ref = anchors.position(anchors.reference_id)?;
    for t in epochs(scn.rates.uwb_hz, scn.duration) {
        streams.uwb_epochs.push(t);
        if t == 0.0 {
            continue;
        }
        let p = traj.position(t);
        let bias_ref = range_bias(&p, &a_ref, &mut nlos_rng);
        for (id, a) in anchors.iter() {
            if id == anchors.reference_id {
                continue;
            }
            let bias = range_bias(&p, a, &mut nlos_rng);
            let n = gaussian(&mut uwb_rng, noise.tdoa_sigma);
            streams.packets_sent += 1;
            if uwb_loss.gen::<f64>() >= scn.packet_reception_rate {
                continue;
            }
            streams.packets_kept += 1;
            streams.tdoa.push(TdoaMeasurement {
                t,
                anchor_i: id,
                anchor_j: anchors.reference_id,
                delta_d: (p - a).norm() + bias - (p - a_ref).norm() - bias_ref + n,
                sigma: noise.tdoa_sigma,
            });
        }
        for f in &scn.floors {
            if p.z >= f.z_min && p.z <= f.z_max {
                streams.floors.push(FloorObservation { t, height: f.height });
                break;
            }
        }
    }

    // Ultrasonic ranges, line of sight only.
    let mut us_rng = rng_for(scn.seed, stream::US_NOISE);
    let mut us_loss = rng_for(scn.seed, stream::US_LOSS);
    for t in epochs(scn.rates.us_hz, scn.duration) {
        if t == 0.0 {
            continue;
        }
        let p = traj.position(t);
        for (id, a) in scn.ultrasonic.anchors.iter().enumerate() {
            let range = (p - a).norm();
            if range >= scn.ultrasonic.max_range || !los_check(&p, a, &scn.nlos.boxes) {
                continue;
            }
            let n = gaussian(&mut us_rng, noise.ultrasonic_sigma);
            streams.packets_sent += 1;
            if us_loss.gen::<f64>() >= scn.packet_reception_rate {
                continue;
            }
            streams.packets_kept += 1;
            streams.ultrasonic.push(UltrasonicRange {
                t,
                anchor_id: id as AnchorId,
                range: range + n,
                sigma: noise.ultrasonic_sigma,
            });
        }
    }
    Ok((truth, streams))
}
