//! Python bindings for the simulator: configuration, single runs, sweeps,
//! reports, and trace synthesis, mirroring the `cavsim` CLI one-for-one.
//!
//! Configurations are [`Scenario`] objects; a run hands back a [`RunResult`]
//! whose `summary()` is the same document a CLI run writes to
//! `summary.json`, converted to plain dicts/lists/numbers.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde_json::Value;

use cavsim_core::engine::{derive_run_seed as core_derive_run_seed, RngHub};
use cavsim_core::mobility::{mph_to_mps as core_mph_to_mps, synth_corridor, write_trace};
use cavsim_core::runner::{
    self, build_report, execute, flow_json, run_sweep, summary_json, RunnerError, SweepAxis,
};
use cavsim_core::scenario::{
    ConfigError, Scenario as CoreScenario, ScenarioError, PRESET_NAMES,
};

// ---------------------------------------------------------------------------
// Error mapping
// ---------------------------------------------------------------------------

fn config_err(e: ConfigError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn scenario_err(e: ScenarioError) -> PyErr {
    match e {
        ScenarioError::Config(c) => config_err(c),
        ScenarioError::MissingTrace(_) => PyFileNotFoundError::new_err(e.to_string()),
        ScenarioError::Io { .. } => PyIOError::new_err(e.to_string()),
        ScenarioError::Trace { .. } => PyValueError::new_err(e.to_string()),
    }
}

fn runner_err(e: RunnerError) -> PyErr {
    match e {
        RunnerError::Scenario(s) => scenario_err(s),
        RunnerError::MissingArtifact { .. } => PyFileNotFoundError::new_err(e.to_string()),
        RunnerError::Io { .. } => PyIOError::new_err(e.to_string()),
        RunnerError::Malformed { .. } | RunnerError::EmptySweep => {
            PyValueError::new_err(e.to_string())
        }
    }
}

// ---------------------------------------------------------------------------
// JSON → Python conversion
// ---------------------------------------------------------------------------

fn value_to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    match v {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(value_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, val) in map {
                dict.set_item(k, value_to_py(py, val)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

/// A validated run configuration.
///
/// Immutable from Python: `with_override` returns a new object. Construct
/// from config text (empty text means all defaults), a named preset, or a
/// config file on disk.
#[pyclass]
struct Scenario {
    inner: CoreScenario,
}

#[pymethods]
impl Scenario {
    /// Parse a configuration from `key = value` text; empty text yields the
    /// defaults. Raises ValueError on unknown keys or bad values.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        let inner = CoreScenario::from_text(text).map_err(config_err)?;
        Ok(Scenario { inner })
    }

    /// Load a named preset (see `presets()`).
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let inner = CoreScenario::preset(name).map_err(config_err)?;
        Ok(Scenario { inner })
    }

    /// Read and validate a config file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = runner::load_scenario(&path).map_err(runner_err)?;
        Ok(Scenario { inner })
    }

    /// A copy with one key overridden and revalidated.
    fn with_override(&self, key: &str, value: &str) -> PyResult<Self> {
        let inner = self.inner.with_override(key, value).map_err(config_err)?;
        Ok(Scenario { inner })
    }

    /// Canonical config text: every key, normalized, sorted.
    fn dump(&self) -> String {
        self.inner.dump()
    }

    /// Reproducibility hash over every semantic field (output_dir excluded).
    fn config_hash(&self) -> u64 {
        self.inner.config_hash()
    }

    /// Canonical value for one key, or None if the key does not exist.
    fn get(&self, key: &str) -> Option<String> {
        self.inner.canonical().get(key).cloned()
    }

    /// The full canonical key-value map as a dict.
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let dict = PyDict::new(py);
        for (k, v) in self.inner.canonical() {
            dict.set_item(k, v)?;
        }
        Ok(dict)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s
    }

    #[getter]
    fn stack(&self) -> &'static str {
        self.inner.stack.as_str()
    }

    #[getter]
    fn app(&self) -> &'static str {
        self.inner.app.as_str()
    }

    #[getter]
    fn output_dir(&self) -> String {
        self.inner.output_dir.display().to_string()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(app={}, stack={}, seed={}, hash={:016x})",
            self.inner.app.as_str(),
            self.inner.stack.as_str(),
            self.inner.seed,
            self.inner.config_hash(),
        )
    }
}

// ---------------------------------------------------------------------------
// RunResult
// ---------------------------------------------------------------------------

/// Everything one finished run produced.
#[pyclass]
struct RunResult {
    inner: runner::RunResult,
}

#[pymethods]
impl RunResult {
    /// The run summary — identical in structure to `summary.json`.
    fn summary(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        value_to_py(py, &summary_json(&self.inner))
    }

    /// Per-flow statistics, one dict per flow (same fields as `flows.csv`).
    fn flows(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let list = PyList::empty(py);
        for f in &self.inner.flows {
            list.append(value_to_py(py, &flow_json(f, self.inner.duration_s))?)?;
        }
        list.into_py_any(py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s
    }

    #[getter]
    fn stack(&self) -> &'static str {
        self.inner.stack.as_str()
    }

    #[getter]
    fn app(&self) -> &'static str {
        self.inner.app.as_str()
    }

    #[getter]
    fn config_hash(&self) -> u64 {
        self.inner.config_hash
    }

    #[getter]
    fn events(&self) -> u64 {
        self.inner.events
    }

    /// Wall-clock milliseconds the run took (not part of the deterministic
    /// output).
    #[getter]
    fn wall_ms(&self) -> u64 {
        self.inner.wall_ms
    }

    fn __repr__(&self) -> String {
        format!(
            "RunResult(app={}, stack={}, flows={}, events={})",
            self.inner.app.as_str(),
            self.inner.stack.as_str(),
            self.inner.flows.len(),
            self.inner.events,
        )
    }
}

// ---------------------------------------------------------------------------
// Module functions
// ---------------------------------------------------------------------------

/// Run a scenario in memory; nothing is written to disk.
#[pyfunction]
fn run(scenario: &Scenario) -> PyResult<RunResult> {
    let inner = execute(&scenario.inner).map_err(scenario_err)?;
    Ok(RunResult { inner })
}

/// Run a scenario and write the artifact set (`config.cfg`, `flows.csv`,
/// `sinr_hist.csv`, `summary.json`, `manifest.json`) into `out_dir`.
#[pyfunction]
fn run_to_dir(scenario: &Scenario, out_dir: PathBuf) -> PyResult<RunResult> {
    let inner = runner::run_to_dir(&scenario.inner, &out_dir).map_err(runner_err)?;
    Ok(RunResult { inner })
}

/// Run `base` once per axis value (axis is "speed", "rate_vpm", or
/// "stack"), writing per-point artifacts and `sweep.csv` under `out_root`.
///
/// Returns a dict with `rows` (one dict per sweep.csv row), `failures`
/// (count of points that errored), and `csv_path`.
#[pyfunction]
#[pyo3(signature = (base, axis, values, out_root, workers = 4))]
fn sweep(
    py: Python<'_>,
    base: &Scenario,
    axis: &str,
    values: Vec<String>,
    out_root: PathBuf,
    workers: usize,
) -> PyResult<Py<PyAny>> {
    let axis = SweepAxis::parse(axis)
        .ok_or_else(|| PyValueError::new_err(format!("unknown sweep axis: {axis}")))?;
    let report = run_sweep(&base.inner, axis, &values, &out_root, workers.max(1))
        .map_err(runner_err)?;
    let rows = PyList::empty(py);
    for row in &report.rows {
        let d = PyDict::new(py);
        d.set_item("axis", row.axis)?;
        d.set_item("value", &row.value)?;
        d.set_item("stack", &row.stack)?;
        d.set_item("metric", &row.metric)?;
        d.set_item("metric_value", row.metric_value)?;
        d.set_item("status", row.status)?;
        rows.append(d)?;
    }
    let out = PyDict::new(py);
    out.set_item("rows", rows)?;
    out.set_item("failures", report.failures)?;
    out.set_item("csv_path", report.csv_path.display().to_string())?;
    out.into_py_any(py)
}

/// Render the human-readable report for a run or sweep directory and write
/// its plot data under `<dir>/plots/`. Returns the report text.
#[pyfunction]
fn report(dir: PathBuf) -> PyResult<String> {
    Ok(build_report(&dir).map_err(runner_err)?.text)
}

/// Synthesize a corridor mobility trace and write it to `out`.
/// Returns `(samples, vehicles)`.
#[pyfunction]
#[pyo3(signature = (out, rate_vpm = 18.0, speed_mph = 45.0, length_m = 2000.0, duration_s = 120.0, seed = 1))]
fn gen_trace(
    out: PathBuf,
    rate_vpm: f64,
    speed_mph: f64,
    length_m: f64,
    duration_s: f64,
    seed: u64,
) -> PyResult<(usize, usize)> {
    let mut rng = RngHub::new(seed);
    let samples = synth_corridor(rate_vpm, speed_mph, length_m, duration_s, rng.stream("corridor"))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| PyIOError::new_err(format!("cannot create {}: {e}", parent.display())))?;
    }
    write_trace(&out, &samples).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let vehicles = samples.iter().map(|s| s.vehicle).collect::<BTreeSet<_>>().len();
    Ok((samples.len(), vehicles))
}

/// Names of the built-in scenario presets.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    PRESET_NAMES.to_vec()
}

/// Per-point seed for sweep index `index` under master seed `master_seed` —
/// the same derivation sweeps use internally.
#[pyfunction]
fn derive_run_seed(master_seed: u64, index: u64) -> u64 {
    core_derive_run_seed(master_seed, index)
}

/// Miles per hour to meters per second (exact: 1 mph = 0.44704 m/s).
#[pyfunction]
fn mph_to_mps(mph: f64) -> f64 {
    core_mph_to_mps(mph)
}

#[pymodule]
fn cavsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_to_dir, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(gen_trace, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(derive_run_seed, m)?)?;
    m.add_function(wrap_pyfunction!(mph_to_mps, m)?)?;
    m.add("FCW_BUDGET_MS", runner::FCW_BUDGET_MS)?;
    m.add("HD_BAND_KBPS", runner::HD_BAND_KBPS)?;
    Ok(())
}
