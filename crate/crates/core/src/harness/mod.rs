//! Scenario loading, overrides, runs, sweeps and their persisted outputs.

pub mod estimators;
pub mod io;
pub mod metrics;

use crate::error::{FusionError, Result};
use crate::simulator::{synthesize, Scenario, Streams, TruthSample};
pub use estimators::{run_method, Estimate, Method, MethodOutput};
use io::StateRow;
pub use metrics::{EpochError, Metrics};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const SUMMARY_HEADER: [&str; 15] = [
    "method",
    "parameter",
    "value",
    "seed",
    "rmse_3d",
    "rmse_vertical",
    "orientation_error_rms",
    "drift_rate",
    "epochs",
    "keyframes",
    "timing_mean_ms",
    "timing_p95_ms",
    "reception_achieved",
    "ultrasonic_dropped",
    "improvement_vs_ekf",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    /// meters
    pub rmse_3d: f64,
    pub rmse_vertical: f64,
    /// degrees
    pub orientation_error_rms: f64,
    /// meters per minute
    pub drift_rate: f64,
    /// Epochs with an estimate; the RMSE runs over these.
    pub epochs: usize,
    pub keyframes: usize,
    pub timing_mean_ms: f64,
    pub timing_p95_ms: f64,
    pub reception_achieved: f64,
    pub ultrasonic_dropped: usize,
    pub gated_updates: usize,
    pub errors: Vec<EpochError>,
    pub config: Scenario,
}

/// Everything one run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub estimates: Vec<StateRow>,
    pub truth: Vec<StateRow>,
}

pub fn load_scenario_value(path: &Path) -> Result<toml::Value> {
    let text = fs::read_to_string(path)?;
    text.parse::<toml::Value>()
        .map_err(|e| FusionError::Toml(format!("{}: {e}", path.display())))
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(FusionError::Override(format!("expected key=value, got {s:?}"))),
    }
}

/// The raw text is read as a TOML value when it parses as one, else as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key, creating intermediate tables as needed.
pub fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(FusionError::Override(format!("malformed key {key:?}")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| FusionError::Override(format!("{key:?}: {part:?} is not inside a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| FusionError::Override(format!("{key:?} does not name a table entry")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

pub fn scenario_from_value(value: toml::Value) -> Result<Scenario> {
    let scn: Scenario = value.try_into().map_err(|e: toml::de::Error| FusionError::Toml(e.to_string()))?;
    scn.validate()?;
    Ok(scn)
}

/// Loads a scenario file, applies `overrides` in order, then `seed`.
pub fn load_scenario(path: &Path, overrides: &[(String, String)], seed: Option<u64>) -> Result<Scenario> {
    let mut value = load_scenario_value(path)?;
    for (k, v) in overrides {
        apply_override(&mut value, k, v)?;
    }
    if let Some(seed) = seed {
        apply_override(&mut value, "seed", &seed.to_string())?;
    }
    scenario_from_value(value)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the effective scenario and the methods run on it.
pub fn config_hash(scn: &Scenario, methods: &[Method]) -> String {
    let json = serde_json::to_vec(&(scn, methods)).expect("scenario serializes");
    sha256_hex(&json)
}

/// Runs `method` on already synthesized or loaded streams.
pub fn run_on_streams(scn: &Scenario, method: Method, truth: &[TruthSample], streams: &Streams) -> Result<RunOutput> {
    let out = run_method(method, scn, truth, streams, &scn.engine)?;
    let estimates = io::estimate_rows(&out.estimates);
    let truth = io::truth_rows(truth);
    let report = build_report(scn, method, &estimates, &truth, &out, streams);
    Ok(RunOutput {
        report,
        estimates,
        truth,
    })
}

/// Metrics are computed from the rows exactly as they are persisted.
fn build_report(
    scn: &Scenario,
    method: Method,
    estimates: &[StateRow],
    truth: &[StateRow],
    out: &MethodOutput,
    streams: &Streams,
) -> RunReport {
    let m = metrics_from_rows(estimates, truth);
    let (timing_mean_ms, timing_p95_ms) = metrics::timing_summary(&out.timings);
    RunReport {
        scenario: scn.name.clone(),
        method,
        seed: scn.seed,
        config_hash: config_hash(scn, &[method]),
        rmse_3d: m.rmse_3d,
        rmse_vertical: m.rmse_vertical,
        orientation_error_rms: m.orientation_error_rms,
        drift_rate: m.drift_rate,
        epochs: m.epochs,
        keyframes: streams.uwb_epochs.len(),
        timing_mean_ms,
        timing_p95_ms,
        reception_achieved: streams.reception_achieved(),
        ultrasonic_dropped: out.ultrasonic_dropped,
        gated_updates: out.gated_updates,
        errors: m.errors,
        config: scn.clone(),
    }
}

pub fn metrics_from_rows(estimates: &[StateRow], truth: &[StateRow]) -> Metrics {
    let est: Vec<Estimate> = estimates.iter().map(StateRow::estimate).collect();
    let gt: Vec<TruthSample> = truth.iter().map(StateRow::truth).collect();
    metrics::compute(&est, &gt)
}

pub fn run(scn: &Scenario, method: Method) -> Result<RunOutput> {
    let (truth, streams) = synthesize(scn)?;
    run_on_streams(scn, method, &truth, &streams)
}

/// Inputs, settings and outputs of one command, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub inputs: Vec<ManifestInput>,
    pub overrides: Vec<String>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub config_hash: String,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInput {
    pub path: String,
    pub sha256: String,
}

impl ManifestInput {
    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&fs::read(path)?),
        })
    }
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            overrides: Vec::new(),
            seeds: Vec::new(),
            methods: Vec::new(),
            config_hash: String::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}

/// Writes `estimates.csv`, `truth.csv`, `report.json` and `summary.csv`;
/// returns the file names.
pub fn write_run(out_dir: &Path, out: &RunOutput) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir)?;
    io::write_states_file(&out_dir.join("estimates.csv"), &out.estimates)?;
    io::write_states_file(&out_dir.join("truth.csv"), &out.truth)?;
    fs::write(out_dir.join("report.json"), serde_json::to_vec_pretty(&out.report)?)?;
    let row = SweepRow {
        parameter: String::new(),
        value: String::new(),
        report: out.report.clone(),
        improvement_vs_ekf: None,
    };
    write_summary(&out_dir.join("summary.csv"), std::slice::from_ref(&row))?;
    Ok(["estimates.csv", "truth.csv", "report.json", "summary.csv"]
        .map(String::from)
        .to_vec())
}

/// Writes `measurements.csv` and `truth.csv`.
pub fn write_simulation(out_dir: &Path, truth: &[TruthSample], streams: &Streams) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir)?;
    io::write_measurements_file(&out_dir.join("measurements.csv"), streams)?;
    io::write_states_file(&out_dir.join("truth.csv"), &io::truth_rows(truth))?;
    Ok(["measurements.csv", "truth.csv"].map(String::from).to_vec())
}

/// Reads what `write_simulation` wrote.
pub fn load_simulation(dir: &Path) -> Result<(Vec<TruthSample>, Streams)> {
    let streams = io::read_measurements_file(&dir.join("measurements.csv"))?;
    let truth = io::read_states_file(&dir.join("truth.csv"))?
        .iter()
        .map(StateRow::truth)
        .collect();
    Ok((truth, streams))
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    /// Dotted scenario key, e.g. `packet_reception_rate`.
    pub parameter: String,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub report: RunReport,
    /// `1 - rmse / rmse_ekf` on the same cell and seed.
    pub improvement_vs_ekf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub method: Method,
    pub value: String,
    pub runs: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub rmse_vertical_mean: f64,
    pub drift_rate_mean: f64,
    pub drift_rate_std: f64,
    pub orientation_error_mean: f64,
    pub timing_mean_ms: f64,
    pub improvement_vs_ekf_mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellAggregate>,
}

impl SweepResult {
    /// Rows of one cell and method, ordered by seed as given.
    pub fn select(&self, method: Method, value: &str) -> Vec<&RunReport> {
        self.rows
            .iter()
            .filter(|r| r.report.method == method && r.value == value)
            .map(|r| &r.report)
            .collect()
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Every (value, seed) pair is synthesized once and all methods run on the
/// same streams.
pub fn sweep(base: &toml::Value, spec: &SweepSpec) -> Result<SweepResult> {
    if spec.values.is_empty() {
        return Err(FusionError::Override("sweep needs at least one value".into()));
    }
    if spec.seeds.is_empty() || spec.methods.is_empty() {
        return Err(FusionError::Override("sweep needs at least one seed and one method".into()));
    }
    let jobs: Vec<(&String, u64)> = spec
        .values
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |s| (v, *s)))
        .collect();
    let per_job: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|(value, seed)| -> Result<Vec<SweepRow>> {
            let mut v = base.clone();
            apply_override(&mut v, &spec.parameter, value)?;
            apply_override(&mut v, "seed", &seed.to_string())?;
            let scn = scenario_from_value(v)?;
            let (truth, streams) = synthesize(&scn)?;
            let reports = spec
                .methods
                .iter()
                .map(|m| run_on_streams(&scn, *m, &truth, &streams).map(|o| o.report))
                .collect::<Result<Vec<_>>>()?;
            let ekf = reports.iter().find(|r| r.method == Method::Ekf).map(|r| r.rmse_3d);
            Ok(reports
                .into_iter()
                .map(|report| SweepRow {
                    parameter: spec.parameter.clone(),
                    value: value.to_string(),
                    improvement_vs_ekf: ekf.map(|e| 1.0 - report.rmse_3d / e),
                    report,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = per_job.into_iter().flatten().collect();

    let mut groups: BTreeMap<(usize, Method), Vec<&SweepRow>> = BTreeMap::new();
    for r in &rows {
        let vi = spec.values.iter().position(|v| *v == r.value).expect("value from spec");
        groups.entry((vi, r.report.method)).or_default().push(r);
    }
    let cells = groups
        .into_iter()
        .map(|((vi, method), rs)| {
            let col = |f: fn(&SweepRow) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (rmse_mean, rmse_std) = mean_std(&col(|r| r.report.rmse_3d));
            let (drift_rate_mean, drift_rate_std) = mean_std(&col(|r| r.report.drift_rate));
            let improvements: Vec<f64> = rs.iter().filter_map(|r| r.improvement_vs_ekf).collect();
            CellAggregate {
                method,
                value: spec.values[vi].clone(),
                runs: rs.len(),
                rmse_mean,
                rmse_std,
                rmse_vertical_mean: mean_std(&col(|r| r.report.rmse_vertical)).0,
                drift_rate_mean,
                drift_rate_std,
                orientation_error_mean: mean_std(&col(|r| r.report.orientation_error_rms)).0,
                timing_mean_ms: mean_std(&col(|r| r.report.timing_mean_ms)).0,
                improvement_vs_ekf_mean: (!improvements.is_empty()).then(|| mean_std(&improvements).0),
            }
        })
        .collect();
    Ok(SweepResult { rows, cells })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_summary(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FusionError::Csv(e.to_string()))?;
    w.write_record(SUMMARY_HEADER).map_err(|e| FusionError::Csv(e.to_string()))?;
    for r in rows {
        let p = &r.report;
        w.write_record([
            p.method.name().to_string(),
            r.parameter.clone(),
            r.value.clone(),
            p.seed.to_string(),
            p.rmse_3d.to_string(),
            p.rmse_vertical.to_string(),
            p.orientation_error_rms.to_string(),
            p.drift_rate.to_string(),
            p.epochs.to_string(),
            p.keyframes.to_string(),
            p.timing_mean_ms.to_string(),
            p.timing_p95_ms.to_string(),
            p.reception_achieved.to_string(),
            p.ultrasonic_dropped.to_string(),
            opt(r.improvement_vs_ekf),
        ])
        .map_err(|e| FusionError::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate(path: &Path, cells: &[CellAggregate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FusionError::Csv(e.to_string()))?;
    w.write_record([
        "method",
        "value",
        "runs",
        "rmse_mean",
        "rmse_std",
        "rmse_vertical_mean",
        "drift_rate_mean",
        "drift_rate_std",
        "orientation_error_mean",
        "timing_mean_ms",
        "improvement_vs_ekf_mean",
    ])
    .map_err(|e| FusionError::Csv(e.to_string()))?;
    for c in cells {
        w.write_record([
            c.method.name().to_string(),
            c.value.clone(),
            c.runs.to_string(),
            c.rmse_mean.to_string(),
            c.rmse_std.to_string(),
            c.rmse_vertical_mean.to_string(),
            c.drift_rate_mean.to_string(),
            c.drift_rate_std.to_string(),
            c.orientation_error_mean.to_string(),
            c.timing_mean_ms.to_string(),
            opt(c.improvement_vs_ekf_mean),
        ])
        .map_err(|e| FusionError::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `summary.csv` and `aggregate.csv`.
pub fn write_sweep(out_dir: &Path, result: &SweepResult) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir)?;
    write_summary(&out_dir.join("summary.csv"), &result.rows)?;
    write_aggregate(&out_dir.join("aggregate.csv"), &result.cells)?;
    Ok(["summary.csv", "aggregate.csv"].map(String::from).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_keys_and_types() {
        let mut v: toml::Value = "duration = 5.0\n[noise]\ntdoa_sigma = 0.1\n".parse().unwrap();
        apply_override(&mut v, "noise.tdoa_sigma", "0.0").unwrap();
        apply_override(&mut v, "engine.nlos.residual_gate_enabled", "false").unwrap();
        apply_override(&mut v, "name", "lab").unwrap();
        assert_eq!(v["noise"]["tdoa_sigma"].as_float(), Some(0.0));
        assert_eq!(v["engine"]["nlos"]["residual_gate_enabled"].as_bool(), Some(false));
        assert_eq!(v["name"].as_str(), Some("lab"));
        assert!(apply_override(&mut v, "duration.x", "1").is_err());
        assert!(apply_override(&mut v, "a..b", "1").is_err());
    }

    #[test]
    fn assignment_parsing() {
        assert_eq!(parse_assignment("a.b = 3").unwrap(), ("a.b".into(), "3".into()));
        assert!(parse_assignment("novalue").is_err());
        assert!(parse_assignment("=3").is_err());
    }

    #[test]
    fn empty_sweep_is_an_error() {
        let spec = SweepSpec {
            parameter: "packet_reception_rate".into(),
            values: vec![],
            seeds: vec![1],
            methods: vec![Method::Fgo],
        };
        assert!(sweep(&toml::Value::Table(Default::default()), &spec).is_err());
    }

    #[test]
    fn unknown_method_is_rejected() {
        assert!(matches!("pf".parse::<Method>(), Err(FusionError::UnknownMethod(_))));
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
