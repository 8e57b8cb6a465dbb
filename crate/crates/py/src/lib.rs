//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists, using the same field names as the JSON formats.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use semtrust::harness::{self, ScenarioConfig};
use semtrust::{
    DeviceId, EvalConfig, Factor, SemanticLabel, TaskSpec, TaskTrustHypergraph, TrustAnnotation,
    TrustStatus, TrustTrend,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn eval_config(cfg: Option<&Bound<'_, PyAny>>) -> PyResult<EvalConfig> {
    let cfg: EvalConfig = cfg.map(from_py).transpose()?.unwrap_or_default();
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

fn device(id: &str) -> PyResult<DeviceId> {
    DeviceId::new(id).map_err(value_err)
}

/// Local semantic trust hypergraph of one device.
#[pyclass(name = "TrustHypergraph")]
struct PyTrustHypergraph {
    inner: semtrust::TrustHypergraph,
}

#[pymethods]
impl PyTrustHypergraph {
    #[new]
    fn new(owner: &str) -> PyResult<Self> {
        Ok(Self {
            inner: semtrust::TrustHypergraph::init_local(device(owner)?),
        })
    }

    #[staticmethod]
    fn from_canonical(text: &str) -> PyResult<Self> {
        let inner = semtrust::TrustHypergraph::from_canonical(text).map_err(value_err)?;
        inner.check_invariants().map_err(PyValueError::new_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn owner(&self) -> String {
        self.inner.owner().to_string()
    }

    fn place(&mut self, annotation: &Bound<'_, PyAny>) -> PyResult<()> {
        let a: TrustAnnotation = from_py(annotation)?;
        self.inner.place(a).map_err(value_err)
    }

    fn reassign(&mut self, annotation: &Bound<'_, PyAny>) -> PyResult<()> {
        let a: TrustAnnotation = from_py(annotation)?;
        self.inner.reassign(a).map_err(value_err)
    }

    /// Members of the edge with the given label, e.g. "trusted_declining".
    fn members(&self, label: &str) -> PyResult<Vec<String>> {
        let label: SemanticLabel = label.parse().map_err(PyValueError::new_err)?;
        let members = self.inner.members(&label).map_err(value_err)?;
        Ok(members.iter().map(|d| d.to_string()).collect())
    }

    fn trusted(&self) -> Vec<String> {
        self.inner.trusted().iter().map(|d| d.to_string()).collect()
    }

    fn annotation<'py>(
        &self,
        py: Python<'py>,
        member: &str,
    ) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.inner
            .annotation(&device(member)?)
            .map(|a| to_py(py, a))
            .transpose()
    }

    fn to_canonical(&self) -> String {
        self.inner.to_canonical()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, member: &str) -> PyResult<bool> {
        Ok(self.inner.contains(&device(member)?))
    }
}

#[pyfunction]
#[pyo3(signature = (record, config=None))]
fn normalize_record(
    record: &Bound<'_, PyAny>,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<Vec<f64>> {
    let cfg = eval_config(config)?;
    Ok(semtrust::normalize_record(&from_py(record)?, &cfg).to_vec())
}

#[pyfunction]
#[pyo3(signature = (records, now, config=None))]
fn score_history(
    records: &Bound<'_, PyAny>,
    now: f64,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<f64> {
    let cfg = eval_config(config)?;
    semtrust::score_history(&from_py::<Vec<_>>(records)?, now, &cfg).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (records, factor, config=None))]
fn estimate_trend<'py>(
    py: Python<'py>,
    records: &Bound<'py, PyAny>,
    factor: &str,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = eval_config(config)?;
    let factor = Factor::ALL
        .into_iter()
        .find(|f| serde_json::to_value(f).is_ok_and(|v| v == factor))
        .ok_or_else(|| value_err(format!("unknown factor `{factor}`")))?;
    let est =
        semtrust::estimate_trend(&from_py::<Vec<_>>(records)?, factor, &cfg).map_err(value_err)?;
    to_py(py, &est)
}

#[pyfunction]
#[pyo3(signature = (local, received, now, config=None))]
fn infer_trust_semantics<'py>(
    py: Python<'py>,
    local: &Bound<'py, PyAny>,
    received: &Bound<'py, PyAny>,
    now: f64,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = eval_config(config)?;
    let ann = semtrust::infer_trust_semantics(
        &from_py::<Vec<_>>(local)?,
        &from_py::<Vec<_>>(received)?,
        now,
        &cfg,
    )
    .map_err(value_err)?;
    to_py(py, &ann)
}

fn task(obj: &Bound<'_, PyAny>) -> PyResult<TaskSpec> {
    let t: TaskSpec = from_py(obj)?;
    t.validate().map_err(value_err)?;
    Ok(t)
}

#[pyfunction]
fn analyze_task<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &semtrust::analyze_task(&task(spec)?))
}

#[pyfunction]
#[pyo3(signature = (spec, snapshot, config=None))]
fn check_resource_match<'py>(
    py: Python<'py>,
    spec: &Bound<'py, PyAny>,
    snapshot: &Bound<'py, PyAny>,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = eval_config(config)?;
    to_py(
        py,
        &semtrust::check_resource_match(&task(spec)?, &from_py(snapshot)?, &cfg),
    )
}

/// `edges` maps each owner to the members of its task hypergraph for `task_id`.
#[pyfunction]
fn find_trust_path(
    src: &str,
    dst: &str,
    task_id: &str,
    edges: BTreeMap<String, Vec<String>>,
) -> PyResult<Option<Vec<String>>> {
    let mut graphs = BTreeMap::new();
    for (owner, members) in edges {
        let owner = device(&owner)?;
        let edge = members.iter().map(|m| device(m)).collect::<PyResult<_>>()?;
        let g = TaskTrustHypergraph {
            owner: owner.clone(),
            task_id: semtrust::TaskId::new(task_id),
            edge,
        };
        graphs.insert(owner, g);
    }
    let path =
        semtrust::find_trust_path(&device(src)?, &device(dst)?, &graphs).map_err(value_err)?;
    Ok(path.map(|p| p.iter().map(|d| d.to_string()).collect()))
}

/// Build an annotation dict; handy for `TrustHypergraph.place`.
#[pyfunction]
#[pyo3(signature = (device_id, time, trusted, declining=false))]
fn annotation<'py>(
    py: Python<'py>,
    device_id: &str,
    time: f64,
    trusted: bool,
    declining: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let status = if trusted {
        TrustStatus::Trusted
    } else {
        TrustStatus::Untrusted
    };
    let trend = if declining {
        TrustTrend::Declining
    } else {
        TrustTrend::Stable
    };
    to_py(
        py,
        &TrustAnnotation::new(device(device_id)?, time, status, trend),
    )
}

/// Run a scenario given as TOML text and return its per-run rows plus the mean row.
#[pyfunction]
fn run_scenario<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ScenarioConfig::from_toml_str(config_toml).map_err(value_err)?;
    let result = py
        .detach(|| harness::run_scenario(&cfg))
        .map_err(|e| match e.exit_code() {
            1 => value_err(e),
            _ => PyRuntimeError::new_err(e.to_string()),
        })?;
    let mut rows = result.rows;
    rows.push(result.mean);
    to_py(py, &rows)
}

#[pymodule]
fn semtrust_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrustHypergraph>()?;
    m.add_function(wrap_pyfunction!(normalize_record, m)?)?;
    m.add_function(wrap_pyfunction!(score_history, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_trend, m)?)?;
    m.add_function(wrap_pyfunction!(infer_trust_semantics, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_task, m)?)?;
    m.add_function(wrap_pyfunction!(check_resource_match, m)?)?;
    m.add_function(wrap_pyfunction!(find_trust_path, m)?)?;
    m.add_function(wrap_pyfunction!(annotation, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
