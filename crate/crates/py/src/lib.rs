//! Python bindings. Samples, configs and reports cross the boundary as
//! plain dicts (JSON-shaped), so the Python side needs no extra classes
//! beyond `Model`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tslm::checkpoint::{load_checkpoint, save_checkpoint};
use tslm::cli::generate_family;
use tslm::data::{Family, MultimodalPrompt};
use tslm::eval::profile::{profile_config, profile_memory as profile_cell};
use tslm::model::{DecodeMode, ModelConfig, TslmModel, Variant};
use tslm::train::{train_stage, OptimSettings};
use tslm::TslmError;

fn to_pyerr(e: TslmError) -> PyErr {
    match e {
        TslmError::Io(e) => PyIOError::new_err(e.to_string()),
        TslmError::MissingInput(m) => PyIOError::new_err(m),
        TslmError::Config(_)
        | TslmError::Parse(_)
        | TslmError::Shape(_)
        | TslmError::UnknownLabel(_)
        | TslmError::EmptySeries
        | TslmError::NonFinite { .. }
        | TslmError::CorpusTooSmall(_)
        | TslmError::CorruptCheckpoint(_)
        | TslmError::ContextOverflow { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Accept a dict (or anything `json.dumps` handles) or a JSON string.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = if obj.is_instance_of::<PyString>() {
        obj.extract()?
    } else {
        obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    serde_json::from_str(&text).map_err(json_err)
}

fn samples_from(objs: &[Bound<'_, PyAny>]) -> PyResult<Vec<MultimodalPrompt>> {
    objs.iter().map(from_py).collect()
}

/// A corpus of `count` samples from one synthetic family, as dicts.
#[pyfunction]
#[pyo3(signature = (family, count, seed = 0, num_series = 1, length = 100))]
fn generate_corpus(py: Python<'_>, family: &str, count: usize, seed: u64, num_series: usize, length: usize) -> PyResult<Py<PyAny>> {
    let family: Family = family.parse().map_err(to_pyerr)?;
    let corpus = generate_family(family, count, seed, num_series, length).map_err(to_pyerr)?;
    to_py(py, &corpus)
}

/// Class labels of a family (empty for caption and simulation).
#[pyfunction]
fn family_classes(family: &str) -> PyResult<Vec<String>> {
    Ok(family.parse::<Family>().map_err(to_pyerr)?.classes())
}

#[pyfunction]
fn extract_answer(text: &str, classes: Vec<String>) -> Option<String> {
    tslm::eval::extract_answer(text, &classes)
}

/// Macro-F1, accuracy and per-class scores (percent) of free-text outputs.
#[pyfunction]
fn score(py: Python<'_>, outputs: Vec<String>, labels: Vec<String>, classes: Vec<String>) -> PyResult<Py<PyAny>> {
    to_py(py, &tslm::eval::score(&outputs, &labels, &classes).map_err(to_pyerr)?)
}

/// Peak training memory of one `(N, L)` cell on a named backbone preset.
#[pyfunction]
#[pyo3(signature = (variant, n, l, backbone = "toy", seed = 0))]
fn profile_memory(py: Python<'_>, variant: &str, n: usize, l: usize, backbone: &str, seed: u64) -> PyResult<Py<PyAny>> {
    let v: Variant = variant.parse().map_err(to_pyerr)?;
    let model = TslmModel::new(profile_config(v, backbone).map_err(to_pyerr)?, seed).map_err(to_pyerr)?;
    to_py(py, &profile_cell(&model, backbone, n, l, seed).map_err(to_pyerr)?)
}

#[pyfunction]
fn lr_factor(step: usize, total: usize, warmup: usize) -> f64 {
    tslm::train::lr_factor(step, total, warmup)
}

#[pyclass(name = "Model", unsendable)]
pub struct PyModel {
    inner: TslmModel,
}

#[pymethods]
impl PyModel {
    /// `config` is a dict shaped like the `[model]` table of a run config;
    /// `variant` overrides its variant field.
    #[new]
    #[pyo3(signature = (variant = None, config = None, seed = 0))]
    fn new(variant: Option<&str>, config: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Self> {
        let mut cfg: ModelConfig = match config {
            Some(c) => from_py(c)?,
            None => ModelConfig::default(),
        };
        if let Some(v) = variant {
            cfg.variant = v.parse().map_err(to_pyerr)?;
        }
        Ok(Self { inner: TslmModel::new(cfg, seed).map_err(to_pyerr)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(&path).map_err(to_pyerr)?.0 })
    }

    #[pyo3(signature = (path, step = 0))]
    fn save(&self, path: PathBuf, step: u64) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, step).map_err(to_pyerr)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.config())
    }

    fn census(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.census())
    }

    fn prompt_token_count(&self, sample: &Bound<'_, PyAny>) -> PyResult<usize> {
        self.inner.prompt_token_count(&from_py(sample)?).map_err(to_pyerr)
    }

    fn cross_kv_count(&self, sample: &Bound<'_, PyAny>) -> PyResult<usize> {
        Ok(self.inner.cross_kv_count(&from_py(sample)?))
    }

    /// Mean target-token loss over a batch of samples.
    fn loss(&self, samples: Vec<Bound<'_, PyAny>>) -> PyResult<f64> {
        let samples = samples_from(&samples)?;
        let refs: Vec<&MultimodalPrompt> = samples.iter().collect();
        let l = self.inner.loss(&refs).map_err(to_pyerr)?;
        tslm::ops::scalar_f64(&l).map_err(to_pyerr)
    }

    #[pyo3(signature = (sample, max_new_tokens = 64, temperature = 0.0, seed = 0))]
    fn generate(&self, sample: &Bound<'_, PyAny>, max_new_tokens: usize, temperature: f64, seed: u64) -> PyResult<String> {
        let mode = if temperature > 0.0 { DecodeMode::Sampled { temperature, seed } } else { DecodeMode::Greedy };
        self.inner.generate(&from_py(sample)?, max_new_tokens, mode).map_err(to_pyerr)
    }

    /// One training stage; returns the report as a dict.
    #[pyo3(signature = (train, val, settings = None))]
    fn train(
        &self,
        py: Python<'_>,
        train: Vec<Bound<'_, PyAny>>,
        val: Vec<Bound<'_, PyAny>>,
        settings: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Py<PyAny>> {
        let opt: OptimSettings = match settings {
            Some(s) => from_py(s)?,
            None => OptimSettings::default(),
        };
        let (train, val) = (samples_from(&train)?, samples_from(&val)?);
        let report = train_stage(&self.inner, &train, &val, &opt, |_| {}).map_err(to_pyerr)?;
        to_py(py, &report)
    }
}

#[pymodule]
fn tslm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(family_classes, m)?)?;
    m.add_function(wrap_pyfunction!(extract_answer, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(profile_memory, m)?)?;
    m.add_function(wrap_pyfunction!(lr_factor, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes() {
        Python::initialize();
        Python::attach(|py| {
            assert!(to_pyerr(TslmError::Config("x".into())).is_instance_of::<PyValueError>(py));
            assert!(to_pyerr(TslmError::MissingInput("x".into())).is_instance_of::<PyIOError>(py));
            assert!(to_pyerr(TslmError::EmptyMask).is_instance_of::<PyRuntimeError>(py));
        });
    }

    #[test]
    fn samples_roundtrip_through_dicts() {
        Python::initialize();
        Python::attach(|py| {
            let corpus = generate_corpus(py, "trend", 3, 1, 1, 100).unwrap();
            let items: Vec<Bound<'_, PyAny>> = corpus.bind(py).extract().unwrap();
            let back = samples_from(&items).unwrap();
            assert_eq!(back, generate_family(Family::Trend, 3, 1, 1, 100).unwrap());
            assert!(generate_corpus(py, "weather", 3, 1, 1, 100).is_err());
        });
    }
}
