//! Python bindings: posteriors, models, checkpoints, evaluation and baselines.
//!
//! Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sbmcl_core::autodiff::Matrix;
use sbmcl_core::episode::{gen_episode, stream_rng, Domain, EpisodeId, Examples, Split, StreamSpec, Targets};
use sbmcl_core::expfam::{FactorizedGaussian, NoisyObservation};
use sbmcl_core::harness::{self, BaselineConfig, BaselineKind, EvalOptions, MetaConfig, MetricsRow};
use sbmcl_core::io;
use sbmcl_core::models::{HeadKind, Posterior, PredictMode, Prediction, SbmclModel, StreamPath};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(Matrix::from_rows(rows))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row_slice(r).to_vec()).collect()
}

fn head(name: &str) -> PyResult<HeadKind> {
    HeadKind::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown head `{name}`")))
}

fn domain(name: &str) -> PyResult<Domain> {
    Domain::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown domain `{name}`")))
}

fn mode(name: &str) -> PyResult<PredictMode> {
    match name {
        "mc" => Ok(PredictMode::DEFAULT_MC),
        "map" => Ok(PredictMode::Map),
        _ => Err(PyValueError::new_err(format!("unknown mode `{name}` (expected mc or map)"))),
    }
}

fn row_dict<'py>(py: Python<'py>, r: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("head", &r.head)?;
    d.set_item("K", r.num_tasks)?;
    d.set_item("shots", r.shots)?;
    d.set_item("metric", r.metric.name())?;
    d.set_item("mean", r.mean)?;
    d.set_item("std", r.std)?;
    d.set_item("n", r.n)?;
    d.set_item("seed", r.seed)?;
    Ok(d)
}

/// Diagonal Gaussian `N(mu, diag(lambda)^-1)` with the sequential and batch update rules.
#[pyclass(name = "Gaussian", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGaussian {
    inner: FactorizedGaussian,
}

fn observations(obs: Vec<(Vec<f64>, Vec<f64>)>) -> PyResult<Vec<NoisyObservation>> {
    obs.into_iter().map(|(z, p)| NoisyObservation::new(z, p).map_err(value_err)).collect()
}

#[pymethods]
impl PyGaussian {
    #[new]
    fn new(mu: Vec<f64>, precision: Vec<f64>) -> PyResult<Self> {
        Ok(PyGaussian { inner: FactorizedGaussian::new(mu, precision).map_err(value_err)? })
    }

    #[staticmethod]
    fn unit(dim: usize) -> Self {
        PyGaussian { inner: FactorizedGaussian::unit(dim) }
    }

    #[getter]
    fn mu(&self) -> Vec<f64> {
        self.inner.mu().to_vec()
    }

    #[getter]
    fn precision(&self) -> Vec<f64> {
        self.inner.lambda().to_vec()
    }

    /// Folds `(z_hat, precision)` pairs in order, one update at a time.
    fn sequential(&self, obs: Vec<(Vec<f64>, Vec<f64>)>) -> PyResult<Self> {
        let mut g = self.inner.clone();
        for o in observations(obs)? {
            g = g.seq_update(&o).map_err(value_err)?;
        }
        Ok(PyGaussian { inner: g })
    }

    fn batch(&self, obs: Vec<(Vec<f64>, Vec<f64>)>) -> PyResult<Self> {
        Ok(PyGaussian { inner: self.inner.batch_update(&observations(obs)?).map_err(value_err)? })
    }

    fn kl_to(&self, other: &PyGaussian) -> PyResult<f64> {
        self.inner.kl_to(&other.inner).map_err(value_err)
    }

    fn log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err("dimension mismatch"));
        }
        Ok(self.inner.log_density(&x))
    }

    fn __repr__(&self) -> String {
        format!("Gaussian(mu={:?}, precision={:?})", self.inner.mu(), self.inner.lambda())
    }
}

/// Trained (or freshly initialized) parameters plus their run configuration.
#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint {
    inner: harness::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Meta-trains a model. Keyword arguments override the defaults of the head/domain pair.
    #[staticmethod]
    #[pyo3(signature = (head, domain, *, steps=None, seed=0, tasks=10, shots=10, z_dim=None, hidden=None, layers=None, noise_var=None, lr=None, meta_batch=None, n_z=None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        head: &str,
        domain: &str,
        steps: Option<usize>,
        seed: u64,
        tasks: usize,
        shots: usize,
        z_dim: Option<usize>,
        hidden: Option<usize>,
        layers: Option<usize>,
        noise_var: Option<f64>,
        lr: Option<f64>,
        meta_batch: Option<usize>,
        n_z: Option<usize>,
    ) -> PyResult<Self> {
        let mut c = MetaConfig::new(self::head(head)?, self::domain(domain)?);
        c.seed = seed;
        c.num_tasks = tasks;
        c.shots = shots;
        c.steps = steps.unwrap_or(c.steps);
        c.model.z_dim = z_dim.unwrap_or(c.model.z_dim);
        c.model.hidden = hidden.unwrap_or(c.model.hidden);
        c.model.layers = layers.unwrap_or(c.model.layers);
        c.model.noise_var = noise_var.unwrap_or(c.model.noise_var);
        c.lr = lr.unwrap_or(c.lr);
        c.meta_batch = meta_batch.unwrap_or(c.meta_batch);
        c.n_z = n_z.unwrap_or(c.n_z);
        let out = py.detach(|| harness::meta_train(&c)).map_err(value_err)?;
        Ok(PyCheckpoint { inner: out.checkpoint })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        io::load_checkpoint(path).map(|inner| PyCheckpoint { inner }).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_checkpoint(path, &self.inner).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// The encoded checkpoint bytes.
    fn to_bytes(&self) -> Vec<u8> {
        io::encode_checkpoint(&self.inner)
    }

    #[getter]
    fn head(&self) -> &'static str {
        self.inner.config.model.head.name()
    }

    #[getter]
    fn domain(&self) -> &'static str {
        self.inner.config.model.domain.name()
    }

    fn model(&self) -> PyResult<PyModel> {
        Ok(PyModel { inner: self.inner.model().map_err(value_err)? })
    }

    #[pyo3(signature = (tasks=None, shots=None, episodes=None, mode="mc"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        tasks: Option<usize>,
        shots: Option<usize>,
        episodes: Option<u64>,
        mode: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let c = &self.inner.config;
        let opts = EvalOptions { mode: self::mode(mode)?, path: StreamPath::Sequential };
        let (k, s, n) = (tasks.unwrap_or(c.num_tasks), shots.unwrap_or(c.shots), episodes.unwrap_or(c.eval_episodes));
        let row = py.detach(|| harness::meta_eval(&self.inner, k, s, n, opts)).map_err(value_err)?;
        row_dict(py, &row)
    }

    #[pyo3(signature = (tasks_grid, shots_grid, episodes=None, mode="mc"))]
    fn sweep<'py>(
        &self,
        py: Python<'py>,
        tasks_grid: Vec<usize>,
        shots_grid: Vec<usize>,
        episodes: Option<u64>,
        mode: &str,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let opts = EvalOptions { mode: self::mode(mode)?, path: StreamPath::Sequential };
        let n = episodes.unwrap_or(self.inner.config.eval_episodes);
        let rows = py
            .detach(|| harness::sweep_generalization(&self.inner, &tasks_grid, &shots_grid, n, opts))
            .map_err(value_err)?;
        rows.iter().map(|r| row_dict(py, r)).collect()
    }
}

/// A posterior produced by [`PyModel::learn`].
#[pyclass(name = "Posterior", frozen)]
struct PyPosterior {
    inner: Posterior,
}

#[pymethods]
impl PyPosterior {
    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner {
            Posterior::Gaussian(_) => "gaussian",
            Posterior::Bank(_) => "bank",
            Posterior::MatrixNormal(_) => "matrix-normal",
        }
    }

    /// The latent posterior of the generic head, if this is one.
    fn gaussian(&self) -> Option<PyGaussian> {
        match &self.inner {
            Posterior::Gaussian(g) => Some(PyGaussian { inner: g.clone() }),
            _ => None,
        }
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: SbmclModel,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn head(&self) -> &'static str {
        self.inner.config().head.name()
    }

    /// Digests a training stream. `y` holds real targets (list of rows),
    /// integer labels, or is omitted for density data.
    #[pyo3(signature = (x, y=None, batch=false))]
    fn learn(&self, x: Vec<Vec<f64>>, y: Option<Bound<'_, PyAny>>, batch: bool) -> PyResult<PyPosterior> {
        let x = matrix(&x)?;
        let y = match y {
            None => Targets::None,
            Some(obj) => {
                if let Ok(labels) = obj.extract::<Vec<usize>>() {
                    Targets::Labels(labels)
                } else {
                    Targets::Real(matrix(&obj.extract::<Vec<Vec<f64>>>()?)?)
                }
            }
        };
        if y.len().is_some_and(|n| n != x.rows()) {
            return Err(PyValueError::new_err("x and y have different lengths"));
        }
        let train = Examples { tasks: vec![0; x.rows()], x, y };
        let path = if batch { StreamPath::Batch } else { StreamPath::Sequential };
        let inner = self.inner.learn_stream(&train, path).map_err(value_err)?;
        Ok(PyPosterior { inner })
    }

    /// Predictive summary at `x`: `mean`/`var` rows for regression and
    /// density, `probs` and `labels` for classification.
    #[pyo3(signature = (posterior, x, mode="mc", seed=0))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        posterior: &PyPosterior,
        x: Vec<Vec<f64>>,
        mode: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut rng = stream_rng(seed, 0);
        let pred = self.inner.predict(&posterior.inner, &matrix(&x)?, self::mode(mode)?, &mut rng).map_err(value_err)?;
        let d = PyDict::new(py);
        match &pred {
            Prediction::Regression { vars, .. } => {
                d.set_item("mean", rows(&pred.mean().expect("regression")))?;
                d.set_item("var", rows(&vars[0]))?;
            }
            Prediction::Classification { probs } => {
                d.set_item("probs", rows(probs))?;
                d.set_item("labels", pred.labels())?;
            }
            Prediction::Density { means, vars } => {
                d.set_item("mean", means.iter().map(rows).collect::<Vec<_>>())?;
                d.set_item("var", vars.iter().map(rows).collect::<Vec<_>>())?;
            }
        }
        Ok(d)
    }

    /// Encoder representation of `x` (alpaca features or class-bank embeddings).
    fn features(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.features(&matrix(&x)?).map_err(value_err)?))
    }
}

/// One generated episode as a dict of `train_x`, `train_y`, `test_x`, `test_y`.
#[pyfunction]
#[pyo3(signature = (domain, tasks=10, shots=10, seed=0, index=0, meta_test=true))]
fn episode<'py>(
    py: Python<'py>,
    domain: &str,
    tasks: usize,
    shots: usize,
    seed: u64,
    index: u64,
    meta_test: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = StreamSpec::new(self::domain(domain)?, tasks, shots, seed);
    let split = if meta_test { Split::MetaTest } else { Split::MetaTrain };
    let ep = gen_episode(&spec, EpisodeId::new(split, index)).map_err(value_err)?;
    let d = PyDict::new(py);
    for (prefix, ex) in [("train", &ep.train), ("test", &ep.test)] {
        d.set_item(format!("{prefix}_x"), rows(&ex.x))?;
        match &ex.y {
            Targets::Real(y) => d.set_item(format!("{prefix}_y"), rows(y))?,
            Targets::Labels(l) => d.set_item(format!("{prefix}_y"), l.clone())?,
            Targets::None => d.set_item(format!("{prefix}_y"), py.None())?,
        }
        d.set_item(format!("{prefix}_tasks"), ex.tasks.clone())?;
    }
    Ok(d)
}

/// Trains plain networks from scratch on meta-test streams.
#[pyfunction]
#[pyo3(signature = (kind, domain="sine", tasks=10, shots=10, episodes=512, seed=0))]
fn baseline<'py>(
    py: Python<'py>,
    kind: &str,
    domain: &str,
    tasks: usize,
    shots: usize,
    episodes: u64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let kind = BaselineKind::parse(kind).ok_or_else(|| PyValueError::new_err(format!("unknown baseline `{kind}`")))?;
    let spec = StreamSpec::new(self::domain(domain)?, tasks, shots, seed);
    let row = py.detach(|| harness::run_baseline(&spec, episodes, &BaselineConfig::of(kind))).map_err(value_err)?;
    row_dict(py, &row)
}

#[pymodule]
fn sbmcl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGaussian>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPosterior>()?;
    m.add_function(wrap_pyfunction!(episode, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    Ok(())
}
