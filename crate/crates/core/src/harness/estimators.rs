//! Drivers that feed synthesized streams to each estimator in timestamp order.

use crate::baseline_ekf::{EkfState, Matrix15};
use crate::error::{FusionError, Result};
use crate::factors::{ElevationConstraint, Factor};
use crate::optimizer::{scale_tdoa_covariance, EngineConfig, NlosContext, OptimizeReport, WindowGraph};
use crate::preintegration::{predict, ImuSample, NavState, PreintegratedImu};
use crate::simulator::{FloorObservation, Scenario, Streams, TruthSample};
use crate::tdoa::{robust_solve, ultrasonic_init, AnchorSet, TdoaMeasurement, UltrasonicRange};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fgo,
    Ekf,
    TdoaOnly,
    ImuOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fgo, Method::Ekf, Method::TdoaOnly, Method::ImuOnly];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Fgo => "fgo",
            Method::Ekf => "ekf",
            Method::TdoaOnly => "tdoa_only",
            Method::ImuOnly => "imu_only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| FusionError::UnknownMethod(s.to_string()))
    }
}

/// One estimate per keyframe epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub t: f64,
    pub state: NavState,
}

#[derive(Clone, Debug, Default)]
pub struct MethodOutput {
    pub estimates: Vec<Estimate>,
    /// Wall time per estimator step (one optimize call for the smoother), seconds.
    pub timings: Vec<f64>,
    pub optimize_reports: Vec<OptimizeReport>,
    pub ultrasonic_dropped: usize,
    pub gated_updates: usize,
}

/// Cursor over time-sorted measurements of one kind.
struct Cursor<'a, T> {
    items: &'a [T],
    next: usize,
}

impl<'a, T> Cursor<'a, T> {
    fn new(items: &'a [T]) -> Self {
        Self { items, next: 0 }
    }

    /// Consumes every item with `time(item) <= until`.
    fn take_until(&mut self, until: f64, time: impl Fn(&T) -> f64) -> &'a [T] {
        let start = self.next;
        while self.next < self.items.len() && time(&self.items[self.next]) <= until {
            self.next += 1;
        }
        &self.items[start..self.next]
    }
}

/// Samples whose hold interval overlaps `[t0, t1)`.
fn imu_slice(imu: &[ImuSample], t0: f64, t1: f64) -> &[ImuSample] {
    let first = imu.partition_point(|s| s.t <= t0).saturating_sub(1);
    let last = imu.partition_point(|s| s.t < t1);
    &imu[first..last.max(first)]
}

/// Ultrasonic ranges attached to the keyframe at `t`; returns how many were dropped.
fn associate<'a>(
    cursor: &mut Cursor<'a, UltrasonicRange>,
    t: f64,
    window: f64,
) -> (Vec<UltrasonicRange>, usize) {
    let mut kept = Vec::new();
    let mut dropped = 0;
    for m in cursor.take_until(t + window, |m| m.t) {
        if (m.t - t).abs() <= window {
            kept.push(*m);
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}

fn initial_state(truth: &[TruthSample]) -> Result<NavState> {
    let first = truth
        .first()
        .ok_or_else(|| FusionError::Scenario("empty ground truth".into()))?;
    Ok(NavState {
        pose: first.pose,
        velocity: first.velocity,
        bias: Default::default(),
    })
}

fn with_sigma(m: &TdoaMeasurement, sigma: f64) -> TdoaMeasurement {
    TdoaMeasurement { sigma, ..*m }
}

struct Context<'a> {
    cfg: &'a EngineConfig,
    uwb: AnchorSet,
    us: AnchorSet,
    streams: &'a Streams,
    init: NavState,
}

impl<'a> Context<'a> {
    fn new(scn: &'a Scenario, truth: &[TruthSample], streams: &'a Streams, cfg: &'a EngineConfig) -> Result<Self> {
        Ok(Self {
            cfg,
            uwb: scn.uwb_anchors()?,
            us: scn.ultrasonic_anchors()?,
            streams,
            init: initial_state(truth)?,
        })
    }

    fn ultrasonic_with_sigma(&self, ranges: &[UltrasonicRange]) -> Vec<UltrasonicRange> {
        ranges
            .iter()
            .map(|m| UltrasonicRange {
                sigma: self.cfg.sigma_ultrasonic,
                ..*m
            })
            .collect()
    }
}

pub fn run_method(
    method: Method,
    scn: &Scenario,
    truth: &[TruthSample],
    streams: &Streams,
    cfg: &EngineConfig,
) -> Result<MethodOutput> {
    cfg.validate()?;
    let ctx = Context::new(scn, truth, streams, cfg)?;
    match method {
        Method::Fgo => run_fgo(&ctx),
        Method::Ekf => run_ekf(&ctx, true),
        Method::ImuOnly => run_ekf(&ctx, false),
        Method::TdoaOnly => run_tdoa_only(&ctx),
    }
}

fn run_fgo(ctx: &Context) -> Result<MethodOutput> {
    let cfg = ctx.cfg;
    let streams = ctx.streams;
    let mut out = MethodOutput::default();
    let mut graph = WindowGraph::new(cfg.window_size);
    let mut tdoa = Cursor::new(&streams.tdoa);
    let mut us = Cursor::new(&streams.ultrasonic);
    let mut floors = Cursor::new(&streams.floors);
    let mut nlos = NlosContext::default();
    let a_ref = ctx.uwb.position(ctx.uwb.reference_id)?;

    for (k, &t) in streams.uwb_epochs.iter().enumerate() {
        let idx = if k == 0 {
            let idx = graph.add_keyframe(ctx.init, t)?;
            graph.add_factor(Factor::state_prior(idx, ctx.init, &cfg.initial_sigmas))?;
            idx
        } else {
            let (last, t_prev) = graph.last().map(|(s, t)| (*s, t)).expect("window is never empty");
            let mut pre = PreintegratedImu::new(last.bias, cfg.imu_noise);
            pre.integrate_interval(imu_slice(&streams.imu, t_prev, t), t_prev, t)?;
            let predicted = predict(&last, &pre, &cfg.gravity);
            let idx = graph.add_keyframe(predicted, t)?;
            graph.add_factor(Factor::imu(idx - 1, idx, pre, cfg.gravity))?;
            idx
        };
        let predicted = *graph.states[idx].position();

        let (ranges, dropped) = associate(&mut us, t, cfg.ultrasonic_association);
        out.ultrasonic_dropped += dropped;
        let ranges = ctx.ultrasonic_with_sigma(&ranges);
        nlos.ultrasonic_position = None;
        if cfg.nlos.ultrasonic_gate_enabled && ranges.len() >= cfg.nlos.min_ultrasonic_ranges {
            nlos.ultrasonic_position = ultrasonic_init(&ranges, &ctx.us, Some(&predicted)).ok();
        }

        let epoch: Vec<TdoaMeasurement> = tdoa
            .take_until(t, |m| m.t)
            .iter()
            .map(|m| with_sigma(m, cfg.sigma_tdoa))
            .collect();
        for m in &epoch {
            if cfg.nlos.residual_gate_enabled {
                nlos.record(m, &predicted, &ctx.uwb, cfg.nlos.residual_window)?;
            }
            let scaled = scale_tdoa_covariance(m, &ctx.uwb, &nlos, &cfg.nlos)?;
            graph.add_factor(Factor::tdoa(
                idx,
                ctx.uwb.position(m.anchor_i)?,
                ctx.uwb.position(m.anchor_j)?,
                scaled.delta_d,
                scaled.sigma,
                cfg.huber_delta,
            ))?;
        }
        if cfg.use_ultrasonic {
            for m in &ranges {
                graph.add_factor(Factor::ultrasonic(idx, ctx.us.position(m.anchor_id)?, m.range, m.sigma))?;
            }
        }
        let floor: Option<FloorObservation> = floors.take_until(t, |f| f.t).last().copied();
        if let (true, Some(f)) = (cfg.use_elevation, floor) {
            if f.t == t {
                let c = ElevationConstraint::new(a_ref, f.height - a_ref.z);
                graph.add_factor(Factor::elevation(idx, c, cfg.sigma_elevation))?;
            }
        }

        let started = Instant::now();
        let report = graph.optimize(cfg)?;
        out.timings.push(started.elapsed().as_secs_f64());
        out.optimize_reports.push(report);
        out.estimates.push(Estimate {
            t,
            state: *graph.states.last().expect("non-empty"),
        });
    }
    Ok(out)
}

fn initial_covariance(cfg: &EngineConfig) -> Matrix15 {
    Matrix15::from_diagonal(&nalgebra::SVector::<f64, 15>::from_iterator(
        cfg.initial_sigmas.iter().map(|s| s * s),
    ))
}

fn run_ekf(ctx: &Context, updates: bool) -> Result<MethodOutput> {
    let cfg = ctx.cfg;
    let streams = ctx.streams;
    let mut out = MethodOutput::default();
    let mut ekf = EkfState::new(ctx.init, initial_covariance(cfg));
    let mut tdoa = Cursor::new(&streams.tdoa);
    let mut us = Cursor::new(&streams.ultrasonic);
    let mut floors = Cursor::new(&streams.floors);
    let a_ref = ctx.uwb.position(ctx.uwb.reference_id)?;
    let mut t_prev = None;
    for &t in &streams.uwb_epochs {
        let started = Instant::now();
        if let Some(t0) = t_prev {
            let samples = imu_slice(&streams.imu, t0, t);
            for (k, s) in samples.iter().enumerate() {
                let start = s.t.max(t0);
                let end = samples.get(k + 1).map_or(t, |n| n.t.min(t));
                if end - start > 1e-9 {
                    ekf.propagate(s, end - start, &cfg.gravity, &cfg.imu_noise)?;
                }
            }
        }
        t_prev = Some(t);
        let epoch = tdoa.take_until(t, |m| m.t);
        let (ranges, dropped) = associate(&mut us, t, cfg.ultrasonic_association);
        out.ultrasonic_dropped += dropped;
        let floor = floors.take_until(t, |f| f.t).last().copied().filter(|f| f.t == t);
        if updates {
            for m in epoch {
                let outcome = ekf.update_tdoa(&with_sigma(m, cfg.sigma_tdoa), &ctx.uwb)?;
                out.gated_updates += usize::from(outcome == crate::baseline_ekf::UpdateOutcome::Gated);
            }
            if cfg.use_ultrasonic {
                for m in ctx.ultrasonic_with_sigma(&ranges) {
                    let outcome = ekf.update_ultrasonic(&m, &ctx.us)?;
                    out.gated_updates += usize::from(outcome == crate::baseline_ekf::UpdateOutcome::Gated);
                }
            }
            if let (true, Some(f)) = (cfg.use_elevation, floor) {
                let c = ElevationConstraint::new(a_ref, f.height - a_ref.z);
                let outcome = ekf.update_scalar(&Factor::elevation(0, c, cfg.sigma_elevation))?;
                out.gated_updates += usize::from(outcome == crate::baseline_ekf::UpdateOutcome::Gated);
            }
        }
        out.timings.push(started.elapsed().as_secs_f64());
        out.estimates.push(Estimate { t, state: ekf.nominal });
    }
    Ok(out)
}

/// Fixes farther than this outside the anchor bounding box are discarded, meters.
pub const TDOA_ONLY_MARGIN: f64 = 5.0;

fn plausible(p: &nalgebra::Vector3<f64>, anchors: &AnchorSet) -> bool {
    let mut lo = nalgebra::Vector3::repeat(f64::INFINITY);
    let mut hi = -lo;
    for (_, a) in anchors.iter() {
        lo = lo.inf(a);
        hi = hi.sup(a);
    }
    (0..3).all(|k| p[k].is_finite() && p[k] >= lo[k] - TDOA_ONLY_MARGIN && p[k] <= hi[k] + TDOA_ONLY_MARGIN)
}

fn run_tdoa_only(ctx: &Context) -> Result<MethodOutput> {
    let cfg = ctx.cfg;
    let streams = ctx.streams;
    let mut out = MethodOutput::default();
    let mut tdoa = Cursor::new(&streams.tdoa);
    let mut us = Cursor::new(&streams.ultrasonic);
    let mut state = ctx.init;
    let mut last_t: Option<f64> = None;
    let delta = cfg.huber_delta.unwrap_or(f64::INFINITY);
    for &t in &streams.uwb_epochs {
        let started = Instant::now();
        let epoch: Vec<TdoaMeasurement> = tdoa
            .take_until(t, |m| m.t)
            .iter()
            .map(|m| with_sigma(m, cfg.sigma_tdoa))
            .collect();
        let (ranges, dropped) = associate(&mut us, t, cfg.ultrasonic_association);
        out.ultrasonic_dropped += dropped;
        let previous = *state.position();
        let init = if ranges.len() >= 3 {
            ultrasonic_init(&ctx.ultrasonic_with_sigma(&ranges), &ctx.us, Some(&previous)).unwrap_or(previous)
        } else {
            previous
        };
        if epoch.len() >= 3 {
            let solved = match robust_solve(&epoch, &init, &ctx.uwb, delta) {
                Ok(sol) => Some(sol.position),
                Err(FusionError::NoConvergence { estimate, .. }) => Some(estimate),
                Err(_) => None,
            }
            .filter(|p| plausible(p, &ctx.uwb));
            if let Some(p) = solved {
                if let Some(t0) = last_t {
                    state.velocity = (p - previous) / (t - t0);
                }
                state.pose.translation = p;
            }
        }
        last_t = Some(t);
        out.timings.push(started.elapsed().as_secs_f64());
        out.estimates.push(Estimate { t, state });
    }
    Ok(out)
}
