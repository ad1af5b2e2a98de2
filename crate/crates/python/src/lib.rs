//! Python bindings for the orthogonal MoE optimizer lab.
//!
//! Matrices cross the boundary as lists of rows; configs and reports cross
//! as plain dicts (via JSON).

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use omoe_core::backprop::{backward, Targets};
use omoe_core::checkpoint::{model_from_json, model_to_json};
use omoe_core::harness::{self, ExperimentConfig};
use omoe_core::linalg::{Matrix, Rng};
use omoe_core::metrics;
use omoe_core::model::{init_model, InitMode, ModelDims, MoEModel, RoutingMode};
use omoe_core::omoe::{AvgNorm, OMoEConfig, OMoEState, StepKind};
use omoe_core::optim::{BaseOptimizer, OptimizerConfig, OptimizerKind};
use omoe_core::projector::{self, OrthoProjector};
use omoe_core::tasks::{self, SubspaceClusters};
use omoe_core::LabError as CoreError;

create_exception!(omoe_lab, LabError, PyException);

fn err(e: CoreError) -> PyErr {
    let kind = e.kind();
    LabError::new_err((kind, e.to_string()))
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn config_from_py(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<ExperimentConfig> {
    match config {
        None => Ok(ExperimentConfig::default()),
        Some(d) => {
            let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
            ExperimentConfig::from_json(&text).map_err(err)
        }
    }
}

fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

fn parse_routing(name: &str) -> PyResult<RoutingMode> {
    match name.to_ascii_lowercase().as_str() {
        "top1" | "top1hard" => Ok(RoutingMode::Top1Hard),
        "dense" | "densesoft" => Ok(RoutingMode::DenseSoft),
        other => Err(PyValueError::new_err(format!("unknown routing `{other}`"))),
    }
}

fn parse_init(name: &str) -> PyResult<InitMode> {
    match name.to_ascii_lowercase().as_str() {
        "replicate" => Ok(InitMode::Replicate),
        "independent" => Ok(InitMode::Independent),
        other => Err(PyValueError::new_err(format!("unknown init mode `{other}`"))),
    }
}

fn parse_kind(name: &str) -> PyResult<OptimizerKind> {
    OptimizerKind::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown optimizer `{name}`")))
}

fn targets(y: &Bound<'_, PyAny>) -> PyResult<Targets> {
    if let Ok(classes) = y.extract::<Vec<usize>>() {
        return Ok(Targets::Classes(classes));
    }
    Ok(Targets::Values(to_matrix(y.extract()?)?))
}

/// Recursive-least-squares projector for one weight layer.
#[pyclass(name = "Projector", module = "omoe_lab")]
struct PyProjector {
    inner: OrthoProjector,
}

#[pymethods]
impl PyProjector {
    #[new]
    #[pyo3(signature = (d, alpha0 = projector::DEFAULT_ALPHA0, lam = projector::DEFAULT_LAMBDA, n_total = 1))]
    fn new(d: usize, alpha0: f64, lam: f64, n_total: u64) -> PyResult<Self> {
        Ok(Self {
            inner: OrthoProjector::new(d, alpha0, lam, n_total).map_err(err)?,
        })
    }

    fn rls_update(&mut self, x: Vec<f64>, alpha: f64) -> PyResult<()> {
        self.inner.rls_update(&x, alpha).map_err(err)
    }

    fn alpha_at(&self, i: u64) -> PyResult<f64> {
        self.inner.alpha_at(i).map_err(err)
    }

    fn matrix(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.matrix())
    }

    fn eigenvalues(&self) -> PyResult<Vec<f64>> {
        self.inner.eigenvalues().map_err(err)
    }

    #[pyo3(signature = (tau = 0.5))]
    fn effective_rank(&self, tau: f64) -> PyResult<usize> {
        self.inner.effective_rank(tau).map_err(err)
    }

    #[getter]
    fn updates_applied(&self) -> u64 {
        self.inner.updates_applied()
    }
}

/// Toy MoE network: input map, gated experts, linear head.
#[pyclass(name = "Model", module = "omoe_lab")]
struct PyModel {
    inner: MoEModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (d_raw, d, h, c, experts = 4, seed = 0, init = "replicate", routing = "top1"))]
    #[allow(clippy::too_many_arguments)]
    fn new(d_raw: usize, d: usize, h: usize, c: usize, experts: usize, seed: u64, init: &str, routing: &str) -> PyResult<Self> {
        let dims = ModelDims { d_raw, d, h, c };
        let inner = init_model(&mut Rng::new(seed), dims, experts, parse_init(init)?, parse_routing(routing)?).map_err(err)?;
        Ok(Self { inner })
    }

    /// Logits for a batch of rows.
    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (logits, _) = self.inner.forward(&to_matrix(x)?).map_err(err)?;
        Ok(to_rows(&logits))
    }

    /// Expert index chosen for each row (highest gate weight).
    fn route(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let (_, tape) = self.inner.forward(&to_matrix(x)?).map_err(err)?;
        Ok(tape.routing().iter().map(|r| r.selected).collect())
    }

    /// Batch loss and gradients keyed by parameter name.
    fn gradients<'py>(&self, py: Python<'py>, x: Vec<Vec<f64>>, y: &Bound<'py, PyAny>) -> PyResult<(f64, Bound<'py, PyDict>)> {
        let (_, tape) = self.inner.forward(&to_matrix(x)?).map_err(err)?;
        let (grads, _) = backward(&self.inner, &tape, &targets(y)?).map_err(err)?;
        let out = PyDict::new(py);
        for (id, g) in grads.iter() {
            out.set_item(id.name(), to_rows(g))?;
        }
        Ok((grads.loss, out))
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn experts(&self) -> usize {
        self.inner.expert_count()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_ids().into_iter().map(|id| id.name()).collect()
    }

    fn expert_param_variance(&self) -> PyResult<f64> {
        metrics::expert_param_variance(&metrics::expert_params(&self.inner)).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        model_to_json(&self.inner).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: model_from_json(text).map_err(err)?,
        })
    }
}

/// Orthogonal optimizer wrapping a base optimizer.
#[pyclass(name = "OMoE", module = "omoe_lab")]
struct PyOMoE {
    inner: OMoEState,
}

#[pymethods]
impl PyOMoE {
    #[new]
    #[pyo3(signature = (model, n_total, kind = "adamw", lr = 3e-3, s = 5, alpha0 = projector::DEFAULT_ALPHA0, lam = projector::DEFAULT_LAMBDA, proper_mean = false))]
    #[allow(clippy::too_many_arguments)]
    fn new(model: &PyModel, n_total: u64, kind: &str, lr: f64, s: u64, alpha0: f64, lam: f64, proper_mean: bool) -> PyResult<Self> {
        let base = BaseOptimizer::new(OptimizerConfig::new(parse_kind(kind)?, lr));
        let config = OMoEConfig {
            s,
            alpha0,
            lambda: lam,
            avg_norm: if proper_mean { AvgNorm::ProperMean } else { AvgNorm::DivideByM },
            ..OMoEConfig::default()
        };
        Ok(Self {
            inner: OMoEState::new(base, config, &model.inner, n_total).map_err(err)?,
        })
    }

    /// Forward, backward and one R or O step. Returns `(kind, loss)`.
    fn step(&mut self, model: &mut PyModel, x: Vec<Vec<f64>>, y: &Bound<'_, PyAny>) -> PyResult<(String, f64)> {
        let out = self
            .inner
            .step_dispatch(&mut model.inner, &to_matrix(x)?, &targets(y)?)
            .map_err(err)?;
        let kind = match out.kind {
            StepKind::R => "R",
            StepKind::O => "O",
        };
        Ok((kind.into(), out.loss))
    }

    fn begin_epoch(&mut self) {
        self.inner.begin_epoch();
    }

    fn average_projector(&self, expert: usize, layer: usize) -> PyResult<Vec<Vec<f64>>> {
        let layer = omoe_core::model::Layer::BOTH
            .get(layer)
            .copied()
            .ok_or_else(|| PyValueError::new_err("layer must be 0 or 1"))?;
        Ok(to_rows(&self.inner.average_projector(expert, layer).map_err(err)?))
    }

    /// `(means produced, means consumed)` so far.
    fn mean_traffic(&self) -> (u64, u64) {
        self.inner.mean_traffic()
    }
}

#[pyfunction]
fn direct_projector(columns: Vec<Vec<f64>>, d: usize, alpha: f64) -> PyResult<Vec<Vec<f64>>> {
    let a = Matrix::from_columns(&columns, d).map_err(err)?;
    Ok(to_rows(&projector::direct_projector(&a, alpha).map_err(err)?))
}

#[pyfunction]
fn rls_update_macs(n: usize) -> u64 {
    projector::rls_update_macs(n)
}

#[pyfunction]
fn expert_param_variance(experts: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::expert_param_variance(&experts).map_err(err)
}

#[pyfunction]
fn similar_fraction(a: Vec<f64>, b: Vec<f64>, threshold: f64) -> PyResult<f64> {
    metrics::similar_fraction(&a, &b, threshold).map_err(err)
}

#[pyfunction]
fn entropy_of_counts(counts: Vec<usize>) -> f64 {
    metrics::entropy_of_counts(&counts)
}

#[pyfunction]
fn diverse_degree(omoe: &PyModel, base: &PyModel) -> PyResult<f64> {
    metrics::diverse_degree(&omoe.inner, &base.inner, None).map_err(err)
}

/// Subspace-cluster classification data as `(rows, labels)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, clusters = 4, d_raw = 32, n_per_cluster = 500, subspace_dim = 6, noise_std = 0.1))]
fn subspace_clusters(
    seed: u64,
    clusters: usize,
    d_raw: usize,
    n_per_cluster: usize,
    subspace_dim: usize,
    noise_std: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let spec = SubspaceClusters {
        clusters,
        d_raw,
        n_per_cluster,
        subspace_dim,
        noise_std,
        ..SubspaceClusters::default()
    };
    let ds = tasks::gen_subspace_clusters(&mut Rng::new(seed), &spec).map_err(err)?;
    let labels = match ds.y {
        Targets::Classes(c) => c,
        Targets::Values(_) => unreachable!("cluster data is labelled"),
    };
    Ok((to_rows(&ds.x), labels))
}

#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_dict(py, &ExperimentConfig::default())
}

/// Trains every seed of `config` and returns the report dict.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn run<'py>(py: Python<'py>, config: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from_py(py, config)?;
    to_dict(py, &harness::run(&cfg).map_err(err)?.report)
}

#[pyfunction]
#[pyo3(signature = (s_values, config = None))]
fn ablate_skip<'py>(py: Python<'py>, s_values: Vec<u64>, config: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from_py(py, config)?;
    to_dict(py, &harness::ablate_skip(&cfg, &s_values).map_err(err)?.rows)
}

#[pyfunction]
#[pyo3(signature = (m_values, config = None))]
fn ablate_experts<'py>(py: Python<'py>, m_values: Vec<usize>, config: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from_py(py, config)?;
    to_dict(py, &harness::ablate_experts(&cfg, &m_values).map_err(err)?.rows)
}

#[pyfunction]
#[pyo3(signature = (kinds, config = None))]
fn compare_optimizers<'py>(py: Python<'py>, kinds: Vec<String>, config: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from_py(py, config)?;
    let kinds = kinds.iter().map(|k| parse_kind(k)).collect::<PyResult<Vec<_>>>()?;
    to_dict(py, &harness::compare_optimizers(&cfg, &kinds, &BTreeMap::new()).map_err(err)?.rows)
}

#[pyfunction]
#[pyo3(signature = (config = None))]
fn overhead_report<'py>(py: Python<'py>, config: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from_py(py, config)?;
    let (d_raw, c) = harness::task_shape(&cfg).map_err(err)?;
    to_dict(py, &harness::overhead_report(&cfg, d_raw, c).map_err(err)?)
}

#[pymodule]
fn omoe_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LabError", m.py().get_type::<LabError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyProjector>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyOMoE>()?;
    m.add_function(wrap_pyfunction!(direct_projector, m)?)?;
    m.add_function(wrap_pyfunction!(rls_update_macs, m)?)?;
    m.add_function(wrap_pyfunction!(expert_param_variance, m)?)?;
    m.add_function(wrap_pyfunction!(similar_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_of_counts, m)?)?;
    m.add_function(wrap_pyfunction!(diverse_degree, m)?)?;
    m.add_function(wrap_pyfunction!(subspace_clusters, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(ablate_skip, m)?)?;
    m.add_function(wrap_pyfunction!(ablate_experts, m)?)?;
    m.add_function(wrap_pyfunction!(compare_optimizers, m)?)?;
    m.add_function(wrap_pyfunction!(overhead_report, m)?)?;
    Ok(())
}
