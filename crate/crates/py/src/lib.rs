//! Python bindings: policy language, simulator and scripted sessions.
//!
//! Each binding is a thin wrapper over a plain function so the logic is
//! testable without an interpreter.

use crewforge::backend::ScriptFile;
use crewforge::orchestrator::{run_to_completion, start_session, transcript_to_ndjson, Deps, SessionConfig};
use crewforge::policy::{parse, print, CompiledPolicy, Policy, SensorFrame};
use crewforge::roles::TaskSpec;
use crewforge::simulator::{builtin_suite, find_scenario, run_scenario};
use crewforge::tester::ScenarioMetrics;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn checked_policy(source: &str) -> Result<Policy, String> {
    let p = parse(source).map_err(|e| e.to_string())?;
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

pub fn canonical(source: &str) -> Result<String, String> {
    checked_policy(source).map(|p| print(&p))
}

pub fn command(source: &str, frame: &SensorFrame) -> Result<(f64, f64), String> {
    let c = CompiledPolicy::new(&checked_policy(source)?).evaluate(frame);
    Ok((c.v, c.w))
}

pub fn scenario_metrics(source: &str, scenario: &str, seed: u64) -> Result<ScenarioMetrics, String> {
    let s = find_scenario(&builtin_suite(), scenario).map_err(|e| e.to_string())?;
    Ok(ScenarioMetrics::from(&run_scenario(&checked_policy(source)?, &s, seed)))
}

/// Runs a fully scripted session; returns the final phase and the transcript
/// as NDJSON.
pub fn scripted_session(spec: &str, config: &str, script: &str, seed: u64) -> Result<(String, String), String> {
    let spec = TaskSpec::from_toml(spec).map_err(|e| e.to_string())?;
    let config = SessionConfig::from_toml(config).map_err(|e| e.to_string())?;
    let script = ScriptFile::from_toml(script).map_err(|e| e.to_string())?;
    let mut deps = Deps::scripted(&config, &spec, &script).map_err(|e| e.to_string())?;
    let mut state = start_session(spec, config, seed).map_err(|e| e.to_string())?;
    run_to_completion(&mut state, &mut deps).map_err(|e| e.to_string())?;
    Ok((state.phase.to_string(), transcript_to_ndjson(&state.transcript)))
}

fn py_err(e: String) -> PyErr {
    PyValueError::new_err(e)
}

/// Parses, validates and pretty-prints a policy.
#[pyfunction]
fn canonical_policy(source: &str) -> PyResult<String> {
    canonical(source).map_err(py_err)
}

/// Drive command `(v, w)` of a policy for one sensor frame.
#[pyfunction]
#[pyo3(signature = (source, dist_to_target, bearing_to_target, obst_front = 5.0, obst_left = 5.0, obst_right = 5.0, own_speed = 0.0))]
fn evaluate_policy(
    source: &str,
    dist_to_target: f64,
    bearing_to_target: f64,
    obst_front: f64,
    obst_left: f64,
    obst_right: f64,
    own_speed: f64,
) -> PyResult<(f64, f64)> {
    let frame = SensorFrame { dist_to_target, bearing_to_target, obst_front, obst_left, obst_right, own_speed };
    command(source, &frame).map_err(py_err)
}

/// Names of the builtin scenarios.
#[pyfunction]
fn scenario_names() -> Vec<String> {
    builtin_suite().into_iter().map(|s| s.name).collect()
}

/// Metrics of one policy on one builtin scenario.
#[pyfunction]
#[pyo3(signature = (source, scenario, seed = 0))]
fn simulate<'py>(py: Python<'py>, source: &str, scenario: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let m = py.detach(|| scenario_metrics(source, scenario, seed)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("ticks", m.ticks)?;
    d.set_item("band_fraction", m.band_fraction)?;
    d.set_item("rms_dist_error", m.rms_dist_error)?;
    d.set_item("collisions", m.collisions)?;
    d.set_item("target_lost", m.target_lost)?;
    Ok(d)
}

/// Runs a scripted session from TOML texts; returns `(phase, ndjson)`.
#[pyfunction]
#[pyo3(signature = (spec, config, script, seed = 0))]
fn run_scripted_session(
    py: Python<'_>,
    spec: &str,
    config: &str,
    script: &str,
    seed: u64,
) -> PyResult<(String, String)> {
    py.detach(|| scripted_session(spec, config, script, seed)).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "crewforge")]
fn crewforge_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(canonical_policy, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_policy, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_names, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_scripted_session, m)?)?;
    Ok(())
}
