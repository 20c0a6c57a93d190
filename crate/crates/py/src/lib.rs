//! Python bindings for the modsep adaptation engine.
//!
//! Configuration structs cross the boundary as keyword arguments (or dicts)
//! with the same field names as their JSON form; reports come back as dicts.

use std::path::PathBuf;

use modsep::dataio::{gen_synthetic, load_dataset, write_dataset, FeatureDataset, SynthConfig};
use modsep::mae::{self, KneeSlope, MaeConfig};
use modsep::mdi::{self, MdiPartition};
use modsep::model::{self, Checkpoint};
use modsep::numcore::Matrix;
use modsep::trainer::{self, HiddenLabelOracle, RunHooks, TrainConfig, Trainer};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(modsep_py, ModsepError, PyException);

fn err(e: modsep::Error) -> PyErr {
    ModsepError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| ModsepError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Builds a config from keyword arguments; unknown keys are rejected.
fn from_kwargs<T: DeserializeOwned + Default>(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(kw) = kwargs else {
        return Ok(T::default());
    };
    let text: String = py.import("json")?.call_method1("dumps", (kw,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| ModsepError::new_err(format!("bad configuration: {e}")))
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

/// A feature dataset: class text embeddings plus per-domain image features.
#[pyclass(frozen, module = "modsep_py")]
struct Dataset {
    inner: FeatureDataset,
}

impl Dataset {
    fn domain(&self, name: &str) -> PyResult<&modsep::dataio::DomainData> {
        self.inner
            .domain(name)
            .ok_or_else(|| ModsepError::new_err(format!("no domain named {name:?}")))
    }
}

#[pymethods]
impl Dataset {
    /// Synthetic benchmark; keyword arguments override generator fields.
    #[staticmethod]
    #[pyo3(signature = (**kwargs))]
    fn synthetic(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: SynthConfig = from_kwargs(py, kwargs)?;
        Ok(Self {
            inner: gen_synthetic(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_dataset(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn d_v(&self) -> usize {
        self.inner.d_v()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names().to_vec()
    }

    /// `(name, role, size)` per domain.
    #[getter]
    fn domains(&self) -> Vec<(String, String, usize)> {
        self.inner
            .domains()
            .iter()
            .map(|d| {
                let role = match d.role() {
                    modsep::dataio::DomainRole::Source => "source",
                    modsep::dataio::DomainRole::Target => "target",
                };
                (d.name().to_string(), role.to_string(), d.len())
            })
            .collect()
    }

    fn features(&self, domain: &str) -> PyResult<Vec<Vec<f32>>> {
        Ok(self.domain(domain)?.features.iter_rows().map(<[f32]>::to_vec).collect())
    }

    fn text_features(&self) -> Vec<Vec<f32>> {
        self.inner.text_features.iter_rows().map(<[f32]>::to_vec).collect()
    }

    /// Visible labels; `None` for target domains.
    fn labels(&self, domain: &str) -> PyResult<Option<Vec<u32>>> {
        Ok(self.domain(domain)?.labels().map(<[u32]>::to_vec))
    }

    /// Cosine zero-shot class per sample of `domain`.
    fn zero_shot_predict(&self, domain: &str) -> PyResult<Vec<usize>> {
        model::zero_shot_predict(&self.domain(domain)?.features, &self.inner.text_features).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(num_classes={}, d_v={}, domains={})",
            self.inner.num_classes(),
            self.inner.d_v(),
            self.inner.domains().len()
        )
    }
}

/// Model parameters and the text-prior estimate.
#[pyclass(frozen, module = "modsep_py", name = "Checkpoint")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.params.num_classes()
    }

    /// Test-time ensemble evaluation. The returned dict holds the report
    /// plus per-sample predictions of each head.
    #[pyo3(signature = (dataset, target=None, w_star=None, m_pct=0.10))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        target: Option<&str>,
        w_star: Option<f32>,
        m_pct: f32,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = MaeConfig {
            w_override: w_star,
            ..Default::default()
        };
        let ev = trainer::evaluate(&dataset.inner, &self.inner, target, &cfg, m_pct).map_err(err)?;
        let out = to_py(py, &ev.report)?;
        out.set_item("vision_predictions", ev.vision_predictions)?;
        out.set_item("text_predictions", ev.text_predictions)?;
        out.set_item("ensemble_predictions", ev.ensemble_predictions)?;
        out.set_item("deltas", ev.mae.deltas)?;
        Ok(out)
    }
}

/// Runs adaptation with the hidden-label annotator. Keyword arguments are
/// training-config fields (`mode`, `max_epoch`, `seed`, `budget`, ...).
/// Returns `(report, checkpoint)`.
#[pyfunction]
#[pyo3(signature = (dataset, checkpoint=None, out=None, **kwargs))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    checkpoint: Option<&PyCheckpoint>,
    out: Option<PathBuf>,
    kwargs: Option<&Bound<'_, PyDict>>,
) -> PyResult<(Bound<'py, PyAny>, PyCheckpoint)> {
    let cfg: TrainConfig = from_kwargs(py, kwargs)?;
    let init = checkpoint.map(|c| c.inner.clone());
    let ds = &dataset.inner;
    let (report, ck) = py
        .detach(|| {
            let mut t = Trainer::new(ds, cfg, init)?;
            let mut oracle = HiddenLabelOracle::for_domain(t.target)?;
            let active = t.cfg.mode.is_active();
            let report = t.run(RunHooks {
                oracle: active.then_some(&mut oracle as &mut dyn mdi::AnnotationOracle),
                out_dir: out,
                ..Default::default()
            })?;
            Ok((report, t.checkpoint()))
        })
        .map_err(err)?;
    Ok((to_py(py, &report)?, PyCheckpoint { inner: ck }))
}

/// Source-only training for a source-free warm start. Returns
/// `(report, checkpoint)`.
#[pyfunction]
#[pyo3(signature = (dataset, holdout=0.2, **kwargs))]
fn pretrain_source<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    holdout: f64,
    kwargs: Option<&Bound<'_, PyDict>>,
) -> PyResult<(Bound<'py, PyAny>, PyCheckpoint)> {
    let cfg: TrainConfig = from_kwargs(py, kwargs)?;
    let ds = &dataset.inner;
    let (ck, report) = py.detach(|| trainer::pretrain_source(ds, &cfg, holdout)).map_err(err)?;
    Ok((to_py(py, &report)?, PyCheckpoint { inner: ck }))
}

/// MDI category of one sample: `"mi"`, `"ms"`, `"un_a"` or `"un_e"`.
#[pyfunction]
fn categorize(y_v: Vec<f32>, y_l: Vec<f32>) -> PyResult<&'static str> {
    if y_v.len() != y_l.len() || y_v.len() < 2 {
        return Err(ModsepError::new_err("logit vectors must share a length of at least 2"));
    }
    Ok(mdi::categorize_one(&y_v, &y_l).as_str())
}

#[pyfunction]
fn mi_score(y_v: Vec<f32>, y_l: Vec<f32>) -> f32 {
    mdi::mi_score(&y_v, &y_l)
}

#[pyfunction]
fn un_score(y_v: Vec<f32>) -> f32 {
    mdi::un_score(&y_v)
}

/// Full MDI partition of a batch of logits with the confident subset for
/// the top fraction `m_pct` of MI samples.
#[pyfunction]
#[pyo3(signature = (y_v, y_l, m_pct=0.10))]
fn partition<'py>(py: Python<'py>, y_v: Vec<Vec<f32>>, y_l: Vec<Vec<f32>>, m_pct: f32) -> PyResult<Bound<'py, PyAny>> {
    if !(0.0..=1.0).contains(&m_pct) {
        return Err(ModsepError::new_err(format!("m_pct must lie in [0, 1], got {m_pct}")));
    }
    let mut p = MdiPartition::categorize(&matrix(y_v)?, &matrix(y_l)?).map_err(err)?;
    p.select_confident(m_pct);
    to_py(py, &p)
}

/// Ensemble weight at which the vision top class overtakes the text one.
#[pyfunction]
fn ensemble_threshold(y_v: Vec<f32>, y_l: Vec<f32>) -> Option<f32> {
    mae::ensemble_threshold(&y_v, &y_l)
}

/// Knee of the sorted threshold curve. `slope` is `"included"` or `"total"`.
#[pyfunction]
#[pyo3(signature = (deltas, n_total, slope="included"))]
fn knee_w_star(mut deltas: Vec<f32>, n_total: usize, slope: &str) -> PyResult<Option<f32>> {
    let mode = match slope {
        "included" => KneeSlope::Included,
        "total" => KneeSlope::Total,
        other => return Err(ModsepError::new_err(format!("unknown slope {other:?}"))),
    };
    deltas.sort_by(f32::total_cmp);
    Ok(mae::knee_w_star(&deltas, n_total, mode))
}

#[pymodule]
fn modsep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ModsepError", m.py().get_type::<ModsepError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_source, m)?)?;
    m.add_function(wrap_pyfunction!(categorize, m)?)?;
    m.add_function(wrap_pyfunction!(mi_score, m)?)?;
    m.add_function(wrap_pyfunction!(un_score, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(knee_w_star, m)?)?;
    Ok(())
}
