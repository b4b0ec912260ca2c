//! Python bindings: run scenarios, sweep parameters and check Jacobians.

use indoor_fusion::error::FusionError;
use indoor_fusion::factors::jacobian_self_test;
use indoor_fusion::harness::{self, io::StateRow, Method, RunReport, SweepSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::collections::BTreeMap;
use std::path::Path;

fn to_py(e: FusionError) -> PyErr {
    match e {
        FusionError::Scenario(_)
        | FusionError::Override(_)
        | FusionError::UnknownMethod(_)
        | FusionError::InfeasibleTrajectory(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn overrides_vec(overrides: Option<BTreeMap<String, String>>) -> Vec<(String, String)> {
    overrides.unwrap_or_default().into_iter().collect()
}

fn report_dict<'py>(py: Python<'py>, r: &RunReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("scenario", &r.scenario)?;
    d.set_item("method", r.method.name())?;
    d.set_item("seed", r.seed)?;
    d.set_item("config_hash", &r.config_hash)?;
    d.set_item("rmse_3d", r.rmse_3d)?;
    d.set_item("rmse_vertical", r.rmse_vertical)?;
    d.set_item("orientation_error_rms", r.orientation_error_rms)?;
    d.set_item("drift_rate", r.drift_rate)?;
    d.set_item("epochs", r.epochs)?;
    d.set_item("keyframes", r.keyframes)?;
    d.set_item("timing_mean_ms", r.timing_mean_ms)?;
    d.set_item("timing_p95_ms", r.timing_p95_ms)?;
    d.set_item("reception_achieved", r.reception_achieved)?;
    Ok(d)
}

fn rows(rows: &[StateRow]) -> Vec<[f64; 11]> {
    rows.iter()
        .map(|r| [r.t, r.x, r.y, r.z, r.qw, r.qx, r.qy, r.qz, r.vx, r.vy, r.vz])
        .collect()
}

/// Runs one method on a scenario file. Returns the metrics plus
/// `estimates` and `truth` as lists of `(t, x, y, z, qw, qx, qy, qz, vx, vy, vz)`.
#[pyfunction]
#[pyo3(signature = (scenario, method = "fgo", seed = None, overrides = None))]
fn run<'py>(
    py: Python<'py>,
    scenario: &str,
    method: &str,
    seed: Option<u64>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<Bound<'py, PyDict>> {
    let method: Method = method.parse().map_err(to_py)?;
    let scn = harness::load_scenario(Path::new(scenario), &overrides_vec(overrides), seed).map_err(to_py)?;
    let out = py.detach(|| harness::run(&scn, method)).map_err(to_py)?;
    let d = report_dict(py, &out.report)?;
    d.set_item("estimates", rows(&out.estimates))?;
    d.set_item("truth", rows(&out.truth))?;
    Ok(d)
}

/// Sweeps one dotted scenario key over `values` and `seeds`; one dict per run.
#[pyfunction]
#[pyo3(signature = (scenario, parameter, values, seeds, methods = None, overrides = None))]
fn sweep<'py>(
    py: Python<'py>,
    scenario: &str,
    parameter: &str,
    values: Vec<String>,
    seeds: Vec<u64>,
    methods: Option<Vec<String>>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let methods = match methods {
        Some(ms) => ms.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>().map_err(to_py)?,
        None => Method::ALL.to_vec(),
    };
    let mut base = harness::load_scenario_value(Path::new(scenario)).map_err(to_py)?;
    for (k, v) in overrides_vec(overrides) {
        harness::apply_override(&mut base, &k, &v).map_err(to_py)?;
    }
    let spec = SweepSpec {
        parameter: parameter.to_string(),
        values,
        seeds,
        methods,
    };
    let result = py.detach(|| harness::sweep(&base, &spec)).map_err(to_py)?;
    result
        .rows
        .iter()
        .map(|row| {
            let d = report_dict(py, &row.report)?;
            d.set_item("parameter", &row.parameter)?;
            d.set_item("value", &row.value)?;
            d.set_item("improvement_vs_ekf", row.improvement_vs_ekf)?;
            Ok(d)
        })
        .collect()
}

/// Worst relative Jacobian error per factor kind.
#[pyfunction]
#[pyo3(signature = (seed = 0, points = 50))]
fn check_jacobians(seed: u64, points: usize) -> PyResult<BTreeMap<String, f64>> {
    let results = jacobian_self_test(seed, points).map_err(to_py)?;
    Ok(results.into_iter().map(|(k, e)| (format!("{k:?}"), e)).collect())
}

#[pymodule]
fn indoor_fusion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(check_jacobians, m)?)?;
    m.add("METHODS", Method::ALL.map(|m| m.name()).to_vec())?;
    Ok(())
}
