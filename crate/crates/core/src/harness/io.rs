//! CSV persistence for state series and measurement streams.
//!
//! State series (estimates and truth) use the columns
//! `t,x,y,z,qw,qx,qy,qz,vx,vy,vz`. Measurement files use `t,sensor,field...`
//! with a sensor-specific field list; see `docs/csv.md`.

use super::estimators::Estimate;
use crate::error::{FusionError, Result};
use crate::manifold::{Pose, Rotation};
use crate::preintegration::{ImuSample, NavState};
use crate::simulator::{FloorObservation, Streams, TruthSample};
use crate::tdoa::{TdoaMeasurement, UltrasonicRange};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

pub const STATE_HEADER: [&str; 11] = ["t", "x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz"];

fn csv_err(e: csv::Error) -> FusionError {
    FusionError::Csv(e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

impl StateRow {
    pub fn new(t: f64, pose: &Pose, velocity: &Vector3<f64>) -> Self {
        let [qw, qx, qy, qz] = pose.rotation.wxyz();
        let p = pose.translation;
        Self {
            t,
            x: p.x,
            y: p.y,
            z: p.z,
            qw,
            qx,
            qy,
            qz,
            vx: velocity.x,
            vy: velocity.y,
            vz: velocity.z,
        }
    }

    /// The stored quaternion is taken as is, without renormalizing.
    pub fn pose(&self) -> Pose {
        let q = UnitQuaternion::new_unchecked(Quaternion::new(self.qw, self.qx, self.qy, self.qz));
        Pose::new(Rotation::from_unit_unchecked(q), Vector3::new(self.x, self.y, self.z))
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.vz)
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            t: self.t,
            state: NavState::new(self.pose(), self.velocity(), Default::default()),
        }
    }

    pub fn truth(&self) -> TruthSample {
        TruthSample {
            t: self.t,
            pose: self.pose(),
            velocity: self.velocity(),
        }
    }
}

pub fn estimate_rows(estimates: &[Estimate]) -> Vec<StateRow> {
    estimates
        .iter()
        .map(|e| StateRow::new(e.t, &e.state.pose, &e.state.velocity))
        .collect()
}

pub fn truth_rows(truth: &[TruthSample]) -> Vec<StateRow> {
    truth.iter().map(|s| StateRow::new(s.t, &s.pose, &s.velocity)).collect()
}

pub fn write_states<W: Write>(w: W, rows: &[StateRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        wtr.write_record(STATE_HEADER).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_states<R: Read>(r: R) -> Result<Vec<StateRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(STATE_HEADER) {
        return Err(FusionError::Csv(format!("unexpected state header {:?}", header)));
    }
    rdr.deserialize().map(|r| r.map_err(csv_err)).collect()
}

pub fn write_states_file(path: &Path, rows: &[StateRow]) -> Result<()> {
    write_states(File::create(path)?, rows)
}

pub fn read_states_file(path: &Path) -> Result<Vec<StateRow>> {
    read_states(File::open(path)?)
}

fn num(x: f64) -> String {
    x.to_string()
}

/// Writes every stream in timestamp order. Besides the sensor rows, `epoch`
/// rows list the keyframe times and a final `packets` row carries the
/// sent/kept packet counts.
pub fn write_measurements<W: Write>(w: W, streams: &Streams) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(w);
    wtr.write_record(["t", "sensor", "fields"]).map_err(csv_err)?;
    let mut rows: Vec<(f64, u8, Vec<String>)> = Vec::new();
    for m in &streams.imu {
        let f = [m.accel.x, m.accel.y, m.accel.z, m.gyro.x, m.gyro.y, m.gyro.z];
        rows.push((m.t, 0, f.iter().map(|v| num(*v)).collect()));
    }
    for &t in &streams.uwb_epochs {
        rows.push((t, 1, Vec::new()));
    }
    for m in &streams.tdoa {
        let f = vec![m.anchor_i.to_string(), m.anchor_j.to_string(), num(m.delta_d), num(m.sigma)];
        rows.push((m.t, 2, f));
    }
    for m in &streams.ultrasonic {
        rows.push((m.t, 3, vec![m.anchor_id.to_string(), num(m.range), num(m.sigma)]));
    }
    for m in &streams.floors {
        rows.push((m.t, 4, vec![num(m.height)]));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    const NAMES: [&str; 5] = ["imu", "epoch", "tdoa", "ultrasonic", "floor"];
    for (t, kind, fields) in rows {
        let mut rec = vec![num(t), NAMES[kind as usize].to_string()];
        rec.extend(fields);
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    let t_end = streams.uwb_epochs.last().copied().unwrap_or(0.0);
    wtr.write_record([
        num(t_end),
        "packets".into(),
        streams.packets_sent.to_string(),
        streams.packets_kept.to_string(),
    ])
    .map_err(csv_err)?;
    wtr.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, k: usize) -> Result<T> {
    let raw = rec
        .get(k)
        .ok_or_else(|| FusionError::Csv(format!("missing column {k} in {:?}", rec)))?;
    raw.parse()
        .map_err(|_| FusionError::Csv(format!("cannot parse {raw:?} in {:?}", rec)))
}

pub fn read_measurements<R: Read>(r: R) -> Result<Streams> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let mut s = Streams::default();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let t: f64 = field(&rec, 0)?;
        let f = |k: usize| field::<f64>(&rec, k + 2);
        match rec.get(1).unwrap_or("") {
            "imu" => s.imu.push(ImuSample {
                t,
                accel: Vector3::new(f(0)?, f(1)?, f(2)?),
                gyro: Vector3::new(f(3)?, f(4)?, f(5)?),
            }),
            "epoch" => s.uwb_epochs.push(t),
            "tdoa" => s.tdoa.push(TdoaMeasurement {
                t,
                anchor_i: field(&rec, 2)?,
                anchor_j: field(&rec, 3)?,
                delta_d: f(2)?,
                sigma: f(3)?,
            }),
            "ultrasonic" => s.ultrasonic.push(UltrasonicRange {
                t,
                anchor_id: field(&rec, 2)?,
                range: f(1)?,
                sigma: f(2)?,
            }),
            "floor" => s.floors.push(FloorObservation { t, height: f(0)? }),
            "packets" => {
                s.packets_sent = field(&rec, 2)?;
                s.packets_kept = field(&rec, 3)?;
            }
            other => return Err(FusionError::Csv(format!("unknown sensor {other:?}"))),
        }
    }
    Ok(s)
}

pub fn write_measurements_file(path: &Path, streams: &Streams) -> Result<()> {
    write_measurements(File::create(path)?, streams)
}

pub fn read_measurements_file(path: &Path) -> Result<Streams> {
    read_measurements(File::open(path)?)
}
