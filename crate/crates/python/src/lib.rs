//! Python bindings. Structured values cross the boundary as JSON-compatible
//! dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use rankserve_core::experiments::write_model;
use rankserve_core::request::InferenceRequest;
use rankserve_core::serving::{ServingStack, StackConfig};
use rankserve_core::shedding::oracle_cutoff_scores;
use rankserve_core::synth::{SynthModel, SynthSpec};
use rankserve_core::workload::{self, ReplayOptions, ReplayTarget, WorkloadSpec};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(PyModule::import(py, "json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = PyModule::import(py, "json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn runtime<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A serving stack over the newest generation under a model root.
#[pyclass(frozen)]
struct Stack {
    inner: Arc<ServingStack>,
}

#[pymethods]
impl Stack {
    /// `config` is a stack configuration dict; missing fields take defaults.
    #[new]
    #[pyo3(signature = (model_root, config=None))]
    fn new(py: Python<'_>, model_root: PathBuf, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let config: StackConfig = match config {
            Some(c) => from_py(py, c)?,
            None => StackConfig::default(),
        };
        let stack = py.detach(|| ServingStack::open_root(config, &model_root)).map_err(runtime)?;
        Ok(Self { inner: Arc::new(stack) })
    }

    #[getter]
    fn generation(&self) -> u64 {
        self.inner.generation()
    }

    /// Scores one request dict and returns the response dict.
    #[pyo3(signature = (request, now=None))]
    fn score(&self, py: Python<'_>, request: &Bound<'_, PyAny>, now: Option<f64>) -> PyResult<Py<PyAny>> {
        let req: InferenceRequest = from_py(py, request)?;
        let stack = Arc::clone(&self.inner);
        let resp = py.detach(move || stack.score(req, now)).map_err(runtime)?;
        to_py(py, &resp)
    }

    /// Drops the user's cached scores; returns how many were dropped.
    #[pyo3(signature = (user, kind="click", now=None))]
    fn feedback(&self, user: u64, kind: &str, now: Option<f64>) -> usize {
        self.inner.feedback(user, kind, now)
    }

    /// Hot-reloads a generation directory if it is newer.
    fn reload(&self, py: Python<'_>, dir: PathBuf) -> PyResult<u64> {
        let stack = Arc::clone(&self.inner);
        py.detach(move || stack.reload(&dir)).map_err(runtime)
    }

    fn metrics(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.metrics())
    }

    fn metrics_text(&self) -> String {
        self.inner.metrics_text()
    }

    /// Replays a trace file; `speed` 0 issues requests as fast as possible.
    #[pyo3(signature = (trace, speed=0.0, max_in_flight=256))]
    fn replay(&self, py: Python<'_>, trace: PathBuf, speed: f64, max_in_flight: usize) -> PyResult<Py<PyAny>> {
        let stack = Arc::clone(&self.inner);
        let metrics = py
            .detach(move || {
                let records = workload::read_trace(&trace)?;
                let target: Arc<dyn ReplayTarget> = stack;
                workload::replay(&records, &target, ReplayOptions { speed, max_in_flight })
            })
            .map_err(runtime)?;
        to_py(py, &metrics)
    }
}

/// Generates a trace from a workload spec dict and writes it when `out` is
/// given. Returns the records.
#[pyfunction]
#[pyo3(signature = (spec=None, out=None))]
fn generate_workload(py: Python<'_>, spec: Option<&Bound<'_, PyAny>>, out: Option<PathBuf>) -> PyResult<Py<PyAny>> {
    let spec: WorkloadSpec = match spec {
        Some(s) => from_py(py, s)?,
        None => WorkloadSpec::default(),
    };
    let records = py.detach(|| workload::generate(&spec)).map_err(runtime)?;
    if let Some(p) = out {
        workload::write_trace(&p, &records).map_err(runtime)?;
    }
    to_py(py, &records)
}

/// Writes a synthetic model generation matching the workload spec under
/// `root` and returns its directory.
#[pyfunction]
#[pyo3(signature = (root, spec=None, generation=1, shared_heads=false))]
fn build_synthetic_model(
    py: Python<'_>,
    root: PathBuf,
    spec: Option<&Bound<'_, PyAny>>,
    generation: u64,
    shared_heads: bool,
) -> PyResult<PathBuf> {
    let workload: WorkloadSpec = match spec {
        Some(s) => from_py(py, s)?,
        None => WorkloadSpec::default(),
    };
    py.detach(|| {
        let mut spec = SynthSpec::for_workload(&workload);
        if shared_heads {
            spec = spec.with_shared_heads();
        }
        let model = SynthModel::generate(&spec, generation).map_err(runtime)?;
        write_model(&model, &root).map_err(runtime)
    })
}

/// Smallest prefix of a list sorted by estimated score that keeps the final
/// top-`n` recall at or above `1 - epsilon`.
#[pyfunction]
fn oracle_cutoff(final_scores: Vec<f64>, n: usize, epsilon: f64) -> usize {
    oracle_cutoff_scores(&final_scores, n, epsilon)
}

#[pyfunction]
fn calibrate_zipf(universe: usize, top_fraction: f64, mass_fraction: f64) -> PyResult<f64> {
    workload::calibrate_zipf(universe, top_fraction, mass_fraction).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn rankserve(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Stack>()?;
    m.add_function(wrap_pyfunction!(generate_workload, m)?)?;
    m.add_function(wrap_pyfunction!(build_synthetic_model, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_cutoff, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_zipf, m)?)?;
    Ok(())
}
