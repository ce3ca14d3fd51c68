//! Python module `adnlab`.

use std::path::PathBuf;

use adnlab as core;
use core::cfreq::cf_from_trajectory;
use core::contin::{continue_branch, detect_bifurcations, ContinuationSettings};
use core::engine::{eigenvalues, reduced_state_matrix, DaeSystem};
use core::run::{run as run_command, Command, RunOptions};
use core::scenario::{load_scenario, Scenario};
use core::smoothlim::{hard_clip as clip, SmoothLimiter};
use core::system::GridSystem;
use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A validated network scenario.
#[pyclass(name = "Scenario", module = "adnlab", frozen)]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Scenario::from_json(text).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_scenario(&path).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    fn canonical_json(&self) -> String {
        self.inner.canonical_json()
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, buses={})", self.inner.name, self.inner.buses.len())
    }
}

/// Equilibrium states, bus voltages and small-signal eigenvalues.
#[pyfunction]
fn equilibrium<'py>(py: Python<'py>, scenario: &PyScenario) -> PyResult<Bound<'py, PyDict>> {
    let sys = GridSystem::new(scenario.inner.to_model().map_err(value_err)?, &[]).map_err(value_err)?;
    let sol = sys.solve_equilibrium(None, &[]).map_err(runtime_err)?;
    let eig = eigenvalues(&reduced_state_matrix(&sys, &sol.x, &[]).map_err(runtime_err)?.a).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("states", sys.state_names())?;
    d.set_item("x", sol.x.clone())?;
    d.set_item("bus_voltages", sys.bus_voltages(&sol.x))?;
    d.set_item("eigenvalues", eig.eigenvalues)?;
    Ok(d)
}

/// Continues the equilibrium in `param` and returns the branch and the
/// bifurcations found on it.
#[pyfunction]
#[pyo3(signature = (scenario, param=None))]
fn continuation<'py>(py: Python<'py>, scenario: &PyScenario, param: Option<String>) -> PyResult<Bound<'py, PyDict>> {
    let sc = &scenario.inner;
    let param = param.unwrap_or_else(|| sc.analysis.continuation.param.clone());
    let sys = GridSystem::new(sc.to_model().map_err(value_err)?, &[param.as_str()]).map_err(value_err)?;
    let p = sys.base_params().to_vec();
    let start = sys.solve_equilibrium(None, &p).map_err(runtime_err)?;
    let settings = ContinuationSettings::from(&sc.analysis.continuation);
    let branch = continue_branch(&sys, &start, &param, &settings).map_err(runtime_err)?;
    let records = detect_bifurcations(&sys, &branch);
    let d = PyDict::new(py);
    d.set_item("param", param)?;
    d.set_item("lambda", branch.points.iter().map(|q| q.lambda).collect::<Vec<_>>())?;
    d.set_item("s", branch.points.iter().map(|q| q.s).collect::<Vec<_>>())?;
    d.set_item("termination", format!("{:?}", branch.termination))?;
    let found: Vec<(String, f64)> = records.iter().map(|r| (r.kind.label().to_string(), r.lambda)).collect();
    d.set_item("bifurcations", found)?;
    Ok(d)
}

/// Runs a command and writes its CSV files; returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (command, scenario, out_dir, param=None, grid=None, steps=None))]
fn run(
    command: &str,
    scenario: &PyScenario,
    out_dir: PathBuf,
    param: Option<String>,
    grid: Option<Vec<f64>>,
    steps: Option<usize>,
) -> PyResult<String> {
    let command: Command = command.parse().map_err(PyValueError::new_err)?;
    let opts = RunOptions { param, grid, steps, quiet: true };
    let m = run_command(command, &scenario.inner, &out_dir, &opts).map_err(runtime_err)?;
    serde_json::to_string(&m).map_err(runtime_err)
}

/// Smooth magnitude limiter with sharpness `k`.
#[pyclass(name = "Limiter", module = "adnlab", frozen)]
struct PyLimiter {
    inner: SmoothLimiter,
}

#[pymethods]
impl PyLimiter {
    #[new]
    fn new(limit: f64, k: f64) -> PyResult<Self> {
        SmoothLimiter::new(limit, k).map(|inner| Self { inner }).ok_or_else(|| PyValueError::new_err("need limit > 0 and k >= 1"))
    }

    fn sat(&self, x: f64) -> f64 {
        self.inner.sat(x)
    }

    fn sat_vector(&self, x: Complex64) -> Complex64 {
        self.inner.sat_vector(x)
    }

    fn activity(&self, x: f64) -> f64 {
        self.inner.activity(x)
    }
}

#[pyfunction]
fn hard_clip(limit: f64, x: f64) -> f64 {
    clip(limit, x)
}

/// `(rho, omega)` of a sampled phasor in a frame spinning at `omega_frame`.
#[pyfunction]
#[pyo3(signature = (t, v, omega_frame, smoothing=1))]
fn complex_frequency(t: Vec<f64>, v: Vec<Complex64>, omega_frame: f64, smoothing: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if t.len() != v.len() {
        return Err(PyValueError::new_err("t and v differ in length"));
    }
    let s = cf_from_trajectory(&t, &v, omega_frame, smoothing, "v").map_err(value_err)?;
    Ok((s.rho, s.omega))
}

#[pymodule]
#[pyo3(name = "adnlab")]
fn adnlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyLimiter>()?;
    m.add_function(wrap_pyfunction!(equilibrium, m)?)?;
    m.add_function(wrap_pyfunction!(continuation, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(hard_clip, m)?)?;
    m.add_function(wrap_pyfunction!(complex_frequency, m)?)?;
    Ok(())
}
