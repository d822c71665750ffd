//! Python bindings for the `cmil` engine.
//!
//! Configs and structured results cross the boundary as plain dicts and
//! lists (through JSON), cohorts and checkpoints as opaque classes.

use std::path::PathBuf;

use cmil::checkpoint::Checkpoint;
use cmil::cohort::{self, Cohort, CohortConfig, SurvivalLabel};
use cmil::survival;
use cmil::trainer::{self, TrainConfig};
use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: cmil::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Deserialize a dict of overrides on top of the defaults.
fn from_py<T: DeserializeOwned>(py: Python<'_>, value: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let text: String = match value {
        Some(v) => py.import("json")?.call_method1("dumps", (v,))?.extract()?,
        None => "{}".into(),
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("config: {e}")))
}

fn labels(times: &[f64], events: &[bool]) -> PyResult<Vec<SurvivalLabel>> {
    if times.len() != events.len() {
        return Err(PyValueError::new_err("times and events differ in length"));
    }
    times
        .iter()
        .zip(events)
        .map(|(&t, &e)| SurvivalLabel::new(t, e).map_err(err))
        .collect()
}

/// A set of slides: patch features, coordinates, thumbnail and outcome.
#[pyclass(name = "Cohort", module = "cmil", frozen)]
struct PyCohort {
    inner: Cohort,
}

impl PyCohort {
    fn slide(&self, i: usize) -> PyResult<&cohort::SlideRecord> {
        self.inner
            .slides
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("slide {i} out of range")))
    }
}

#[pymethods]
impl PyCohort {
    /// Synthetic cohort; `config` holds generator settings by name.
    #[staticmethod]
    #[pyo3(signature = (seed=0, config=None))]
    fn generate(py: Python<'_>, seed: u64, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: CohortConfig = from_py(py, config)?;
        let inner = py
            .detach(|| cohort::generate_synthetic_cohort(&cfg, seed))
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: cohort::load_cohort(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cohort::save_cohort(&self.inner, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Cohort(slides={}, feature_dim={}, thumbnail_dim={})",
            self.inner.len(),
            self.inner.feature_dim,
            self.inner.thumbnail_dim
        )
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim
    }

    #[getter]
    fn thumbnail_dim(&self) -> usize {
        self.inner.thumbnail_dim
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.slides.iter().map(|s| s.id.clone()).collect()
    }

    /// `(time, event)` per slide.
    fn labels(&self) -> Vec<(f64, bool)> {
        self.inner
            .slides
            .iter()
            .map(|s| (s.label.time, s.label.event))
            .collect()
    }

    fn institutions(&self) -> Vec<Option<usize>> {
        self.inner
            .slides
            .iter()
            .map(|s| s.planted_institution)
            .collect()
    }

    /// Patch features of slide `i`, one row per patch.
    fn features(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        let t = self.slide(i)?.features(self.inner.feature_dim);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    fn coords(&self, i: usize) -> PyResult<Vec<(i32, i32)>> {
        Ok(self.slide(i)?.patch_coords.clone())
    }

    fn causal_mask(&self, i: usize) -> PyResult<Option<Vec<bool>>> {
        Ok(self.slide(i)?.planted_causal_mask.clone())
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.inner.len()) {
            return Err(PyIndexError::new_err(format!("slide {i} out of range")));
        }
        Ok(Self {
            inner: self.inner.subset(&indices).map_err(err)?,
        })
    }
}

/// Trained parameters plus frozen cluster and bias statistics.
#[pyclass(name = "Checkpoint", module = "cmil", frozen)]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn train_median_risk(&self) -> Option<f64> {
        self.inner.train_median_risk
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.config)
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(epoch={}, k_effective={})",
            self.inner.epoch, self.inner.k_effective
        )
    }
}

/// Train on `train`, selecting by validation C-index when `val` is given.
/// Returns `(checkpoint, history)`.
#[pyfunction]
#[pyo3(signature = (train, val=None, config=None))]
fn train(
    py: Python<'_>,
    train: &PyCohort,
    val: Option<&PyCohort>,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(PyCheckpoint, Py<PyAny>)> {
    let cfg: TrainConfig = from_py(py, config)?;
    let outcome = py
        .detach(|| trainer::train(&train.inner, val.map(|v| &v.inner), &cfg))
        .map_err(err)?;
    let history = to_py(py, &outcome.history)?;
    Ok((
        PyCheckpoint {
            inner: outcome.checkpoint,
        },
        history,
    ))
}

/// Soft-mask evaluation: risks, node probabilities, C-index, log-rank.
#[pyfunction]
fn evaluate(py: Python<'_>, checkpoint: &PyCheckpoint, cohort: &PyCohort) -> PyResult<Py<PyAny>> {
    let result = py
        .detach(|| trainer::evaluate(&checkpoint.inner, &cohort.inner))
        .map_err(err)?;
    to_py(py, &result)
}

#[pyfunction]
#[pyo3(signature = (cohort, config=None, jobs=1))]
fn cross_validate(
    py: Python<'_>,
    cohort: &PyCohort,
    config: Option<&Bound<'_, PyAny>>,
    jobs: usize,
) -> PyResult<Py<PyAny>> {
    let cfg: TrainConfig = from_py(py, config)?;
    let (summary, _) = py
        .detach(|| trainer::cross_validate(&cohort.inner, &cfg, jobs))
        .map_err(err)?;
    to_py(py, &summary)
}

/// Harrell's concordance; `None` without comparable pairs.
#[pyfunction]
fn c_index(risks: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> PyResult<Option<f64>> {
    let l = labels(&times, &events)?;
    if risks.len() != l.len() {
        return Err(PyValueError::new_err("one risk per subject"));
    }
    Ok(survival::c_index(&risks, &l))
}

/// Negative log partial likelihood of the risks.
#[pyfunction]
fn cox_loss(risks: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> PyResult<f64> {
    survival::cox_loss_value(&risks, &labels(&times, &events)?).map_err(err)
}

/// Kaplan-Meier curve per group id.
#[pyfunction]
fn km_curve(
    py: Python<'_>,
    times: Vec<f64>,
    events: Vec<bool>,
    groups: Vec<usize>,
) -> PyResult<Py<PyAny>> {
    let curves = survival::km_curve(&labels(&times, &events)?, &groups).map_err(err)?;
    to_py(py, &curves)
}

/// Two-group log-rank test; returns `(statistic, p_value)`.
#[pyfunction]
fn log_rank_test(times: Vec<f64>, events: Vec<bool>, in_first: Vec<bool>) -> PyResult<(f64, f64)> {
    let lr = survival::log_rank_test(&labels(&times, &events)?, &in_first).map_err(err)?;
    Ok((lr.statistic, lr.p_value))
}

/// Symmetric k-nearest-neighbour edges over patch coordinates.
#[pyfunction]
fn knn_graph(coords: Vec<(i32, i32)>, k: usize) -> PyResult<Vec<(usize, usize)>> {
    cohort::build_knn_graph(&coords, k).map_err(err)
}

#[pymodule]
#[pyo3(name = "cmil")]
fn cmil_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCohort>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(c_index, m)?)?;
    m.add_function(wrap_pyfunction!(cox_loss, m)?)?;
    m.add_function(wrap_pyfunction!(km_curve, m)?)?;
    m.add_function(wrap_pyfunction!(log_rank_test, m)?)?;
    m.add_function(wrap_pyfunction!(knn_graph, m)?)?;
    Ok(())
}
