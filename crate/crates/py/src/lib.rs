//! Python bindings.
//!
//! Configuration is passed as a dict of the same `key = value` entries the
//! `isf` command reads from its config file, e.g.
//! `{"model.d_model": 16, "train.epochs": 50}`.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyTuple};

use isformer::backtest::{default_buckets, export_attention, parse_buckets, BucketScore};
use isformer::cli::RunConfig;
use isformer::data::{generate_synthetic, load_panel, save_panel, SeriesPanel, YearMonth};
use isformer::network::{load_state, save_state, ModelState};
use isformer::{metrics, train};

create_exception!(
    isformer,
    IsformerError,
    PyException,
    "Error raised by the forecasting engine."
);

fn err(e: isformer::Error) -> PyErr {
    IsformerError::new_err(e.to_string())
}

fn run_config(config: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(d) = config {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = if v.is_instance_of::<PyBool>() {
                if v.extract::<bool>()? { "true" } else { "false" }.to_string()
            } else if v.is_instance_of::<PyList>() || v.is_instance_of::<PyTuple>() {
                // lists become the comma-separated form of the config file
                let items = v
                    .try_iter()?
                    .map(|x| Ok(x?.str()?.to_string()))
                    .collect::<PyResult<Vec<_>>>()?;
                items.join(",")
            } else {
                v.str()?.to_string()
            };
            cfg.set(&key, &value).map_err(err)?;
        }
    }
    Ok(cfg)
}

fn parse_month(s: &str) -> PyResult<YearMonth> {
    s.parse().map_err(err)
}

fn score_dict<'py>(py: Python<'py>, scores: &[BucketScore]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    scores
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("bucket", s.bucket.to_string())?;
            for (name, v) in s.metrics() {
                d.set_item(name, v)?;
            }
            Ok(d)
        })
        .collect()
}

/// Monthly multi-series panel with optional missing observations.
#[pyclass(module = "isformer", frozen)]
struct Panel {
    inner: SeriesPanel,
}

#[pymethods]
impl Panel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_panel(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_panel(&self.inner, path).map_err(err)
    }

    #[getter]
    fn num_series(&self) -> usize {
        self.inner.num_series()
    }

    #[getter]
    fn start(&self) -> String {
        self.inner.start().to_string()
    }

    #[getter]
    fn end(&self) -> String {
        self.inner.end().to_string()
    }

    #[getter]
    fn series_ids(&self) -> Vec<String> {
        self.inner.series().iter().map(|s| s.series_id.clone()).collect()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.inner.covariate_names().to_vec()
    }

    /// Values of one series, `None` where unobserved.
    fn values(&self, series_id: &str) -> PyResult<Vec<Option<f64>>> {
        let q = self
            .inner
            .series_index(series_id)
            .ok_or_else(|| IsformerError::new_err(format!("unknown series {series_id:?}")))?;
        let s = &self.inner.series()[q];
        Ok(s.values.iter().zip(&s.mask).map(|(&v, &m)| m.then_some(v)).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Panel({} series, {}..{})",
            self.inner.num_series(),
            self.inner.start(),
            self.inner.end()
        )
    }
}

/// Trained model.
#[pyclass(module = "isformer", frozen)]
struct Model {
    inner: ModelState,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_state(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_state(&self.inner, path).map_err(err)
    }

    /// Forecasts every series observed in the context window before
    /// `origin` (default: the month after the panel ends).
    #[pyo3(signature = (panel, origin=None, clip_nonnegative=true))]
    fn forecast<'py>(
        &self,
        py: Python<'py>,
        panel: &Panel,
        origin: Option<&str>,
        clip_nonnegative: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let origin = match origin {
            Some(o) => parse_month(o)?,
            None => panel.inner.end().add_months(1),
        };
        let fc = py
            .allow_threads(|| train::forecast(&self.inner, &panel.inner, origin, clip_nonnegative))
            .map_err(err)?;
        fc.iter()
            .map(|f| {
                let d = PyDict::new(py);
                d.set_item("series_id", &f.series_id)?;
                d.set_item("dates", f.dates.iter().map(ToString::to_string).collect::<Vec<_>>())?;
                d.set_item("values", &f.values)?;
                Ok(d)
            })
            .collect()
    }

    /// `m x m` inter-series attention weights at `origin`; row `i` is
    /// series `i`'s distribution over the panel.
    #[pyo3(signature = (panel, origin=None))]
    fn attention(&self, panel: &Panel, origin: Option<&str>) -> PyResult<Vec<Vec<f64>>> {
        let origin = match origin {
            Some(o) => parse_month(o)?,
            None => panel.inner.end().add_months(1),
        };
        let w = export_attention(&self.inner, &panel.inner, origin).map_err(err)?;
        Ok((0..w.shape()[0]).map(|r| w.row(r).to_vec()).collect())
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Synthetic panel from `synth.*` and `seed` keys.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn generate(config: Option<&Bound<'_, PyDict>>) -> PyResult<Panel> {
    let cfg = run_config(config)?;
    let synth = cfg.synth_config().map_err(err)?;
    Ok(Panel {
        inner: generate_synthetic(&synth).map_err(err)?,
    })
}

/// Trains on `panel`. Returns the model and the per-epoch loss history as
/// `(epoch, loss, holdout_loss, learning_rate)` tuples.
#[pyfunction(name = "train")]
#[pyo3(signature = (panel, config=None))]
#[allow(clippy::type_complexity)]
fn train_model(
    py: Python<'_>,
    panel: &Panel,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<(Model, Vec<(usize, f64, Option<f64>, f64)>)> {
    let cfg = run_config(config)?;
    let out = py
        .allow_threads(|| train::train(&panel.inner, &cfg.network, &cfg.train_config()))
        .map_err(err)?;
    let history = out
        .history
        .iter()
        .map(|r| (r.epoch, r.loss, r.holdout_loss, r.learning_rate))
        .collect();
    Ok((Model { inner: out.model }, history))
}

/// Rolling-origin evaluation over `eval.origins`. Returns a dict with the
/// per-origin and averaged bucket scores, the averaged attention matrix
/// (if enabled) and skipped origins.
#[pyfunction]
#[pyo3(signature = (panel, config=None))]
fn backtest<'py>(py: Python<'py>, panel: &Panel, config: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = run_config(config)?;
    if cfg.origins.is_empty() {
        return Err(IsformerError::new_err("config error: `backtest` needs `eval.origins`"));
    }
    let buckets = match &cfg.buckets {
        Some(b) => parse_buckets(b, cfg.network.horizon).map_err(err)?,
        None => default_buckets(cfg.network.horizon),
    };
    let report = py
        .allow_threads(|| {
            isformer::backtest::backtest(
                &panel.inner,
                &cfg.network,
                &cfg.train_config(),
                &cfg.origins,
                &buckets,
                cfg.clip_nonnegative,
            )
        })
        .map_err(err)?;
    let out = PyDict::new(py);
    let origins = PyDict::new(py);
    for r in &report.origins {
        origins.set_item(r.origin.to_string(), score_dict(py, &r.scores)?)?;
    }
    out.set_item("origins", origins)?;
    out.set_item("average", score_dict(py, &report.average)?)?;
    let att = report
        .attention
        .as_ref()
        .map(|w| (0..w.shape()[0]).map(|r| w.row(r).to_vec()).collect::<Vec<_>>());
    out.set_item("attention", att)?;
    out.set_item(
        "skipped",
        report
            .skipped
            .iter()
            .map(|(o, why)| (o.to_string(), why.clone()))
            .collect::<Vec<_>>(),
    )?;
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (actuals, forecasts, mask=None))]
fn wmape(actuals: Vec<f64>, forecasts: Vec<f64>, mask: Option<Vec<bool>>) -> PyResult<f64> {
    metrics::wmape(&actuals, &forecasts, mask.as_deref()).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (actuals, forecasts, mask=None))]
fn rmse(actuals: Vec<f64>, forecasts: Vec<f64>, mask: Option<Vec<bool>>) -> PyResult<f64> {
    metrics::rmse(&actuals, &forecasts, mask.as_deref()).map_err(err)
}

#[pyfunction]
fn rmsse(history: Vec<f64>, actuals: Vec<f64>, forecasts: Vec<f64>) -> PyResult<f64> {
    metrics::rmsse(&history, &actuals, &forecasts).map_err(err)
}

#[pyfunction]
fn wbias(actual_means: Vec<f64>, forecast_means: Vec<f64>, volumes: Vec<f64>) -> PyResult<f64> {
    metrics::wbias(&actual_means, &forecast_means, &volumes).map_err(err)
}

#[pymodule]
#[pyo3(name = "isformer")]
fn isformer_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IsformerError", m.py().get_type::<IsformerError>())?;
    m.add_class::<Panel>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(backtest, m)?)?;
    m.add_function(wrap_pyfunction!(wmape, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(rmsse, m)?)?;
    m.add_function(wrap_pyfunction!(wbias, m)?)?;
    Ok(())
}
