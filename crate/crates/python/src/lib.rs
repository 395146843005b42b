use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use latentlab::distsuite;
use latentlab::graphgrad::{self, FsqConfig, Schedule, Tensor};
use latentlab::lam;
use latentlab::pipeline::{self, Method};
use latentlab::{Error, ErrorCategory};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.category() {
        ErrorCategory::Config => PyValueError::new_err(msg),
        ErrorCategory::MissingPrerequisite => PyFileNotFoundError::new_err(msg),
        ErrorCategory::Numeric => PyArithmeticError::new_err(msg),
        ErrorCategory::Io => PyOSError::new_err(msg),
        ErrorCategory::Contract => PyRuntimeError::new_err(msg),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Tensor::matrix(n, cols, rows.concat()).map_err(py_err)
}

fn nested(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Run configuration; unset JSON fields take their defaults.
#[pyclass(name = "RunConfig")]
struct PyRunConfig {
    inner: pipeline::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => pipeline::RunConfig::from_json(text).map_err(py_err)?,
            None => pipeline::RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: pipeline::RunConfig::load(&path).map_err(py_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn max_budget(&self) -> usize {
        self.inner.max_budget()
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: distsuite::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn collect(config: &PyRunConfig) -> PyResult<Self> {
        let inner = distsuite::collect_dataset(&config.inner.collect_config()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: distsuite::load_dataset(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        distsuite::save_dataset(&self.inner, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_transitions(&self) -> usize {
        self.inner.n_transitions()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.trajectories().first().map_or(0, |t| t.horizon())
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.meta().stacked_dim()
    }

    fn mean_return(&self) -> f64 {
        self.inner.mean_return()
    }

    /// Frame-stacked observation of trajectory `traj` at step `t`.
    fn stacked(&self, traj: usize, t: usize) -> PyResult<Vec<f64>> {
        let tr = self.inner.trajectories().get(traj).ok_or_else(|| PyValueError::new_err("trajectory out of range"))?;
        if t > tr.horizon() {
            return Err(PyValueError::new_err("step out of range"));
        }
        Ok(self.inner.stacked(traj, t))
    }

    /// Trajectory indices revealed at `budget` for experiment seed `seed`.
    fn labeled(&self, budget: usize, seed: u64) -> PyResult<Vec<usize>> {
        let view = self.inner.labeled_view(budget, pipeline::label_seed(self.inner.meta(), seed)).map_err(py_err)?;
        Ok(view.trajectories().to_vec())
    }

    /// Ground-truth actions of one trajectory, for diagnostics only.
    fn diagnostic_actions(&self, traj: usize) -> PyResult<Vec<[f64; 2]>> {
        if traj >= self.inner.len() {
            return Err(PyValueError::new_err("trajectory out of range"));
        }
        let flat = self.inner.diagnostics().actions(traj);
        Ok(flat.chunks(2).map(|c| [c[0], c[1]]).collect())
    }
}

#[pyclass(name = "LamModel")]
struct PyLamModel {
    inner: lam::LamModel,
}

#[pymethods]
impl PyLamModel {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: lam::LamModel::load(&dir).map_err(py_err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(py_err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.config().latent_action_dim
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn encode(&self, obs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(nested(&self.inner.encode(&matrix(obs)?).map_err(py_err)?))
    }

    #[pyo3(signature = (obs_t, obs_tk, k=1))]
    fn idm_infer(&self, obs_t: Vec<Vec<f64>>, obs_tk: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<Vec<f64>>> {
        let z = self.inner.idm_infer(&matrix(obs_t)?, &matrix(obs_tk)?, k).map_err(py_err)?;
        Ok(nested(&z))
    }
}

/// Train the latent action model of `method` and return it with per-epoch
/// metrics as dicts.
#[pyfunction]
#[pyo3(signature = (config, dataset, method="LAOM", seed=0, budget=None))]
fn train_lam(
    py: Python<'_>,
    config: &PyRunConfig,
    dataset: &PyDataset,
    method: &str,
    seed: u64,
    budget: Option<usize>,
) -> PyResult<(PyLamModel, Vec<Py<PyAny>>)> {
    let cfg = &config.inner;
    let method = Method::parse(method).map_err(py_err)?;
    let lam_cfg = pipeline::method_lam_config(cfg, method)
        .ok_or_else(|| PyValueError::new_err(format!("{} has no latent action model", method.name())))?;
    let ds = &dataset.inner;
    let budget = budget.unwrap_or_else(|| cfg.max_budget());
    let view = if lam_cfg.supervision {
        Some(ds.labeled_view(budget, pipeline::label_seed(ds.meta(), seed)).map_err(py_err)?)
    } else {
        None
    };
    let run = py
        .detach(|| pipeline::train_lam(&lam_cfg, &cfg.stages.lam, cfg.stages.probe_learning_rate, ds, view.as_ref(), seed))
        .map_err(py_err)?;
    let mut metrics = Vec::with_capacity(run.metrics.len());
    for m in &run.metrics {
        let d = pyo3::types::PyDict::new(py);
        d.set_item("epoch", m.epoch)?;
        d.set_item("lr", m.lr)?;
        d.set_item("loss", m.loss)?;
        d.set_item("prediction", m.prediction)?;
        d.set_item("supervision", m.supervision)?;
        d.set_item("probe_nmse_z", m.probe_nmse_z)?;
        d.set_item("probe_nmse_h_action", m.probe_nmse_h_action)?;
        d.set_item("probe_nmse_h_distractor", m.probe_nmse_h_distractor)?;
        metrics.push(d.into_any().unbind());
    }
    Ok((PyLamModel { inner: run.model }, metrics))
}

#[pyfunction]
fn fsq_quantize(z: Vec<f64>, levels: Vec<u32>) -> PyResult<Vec<f64>> {
    let fsq = FsqConfig::new(levels).map_err(py_err)?;
    let n = z.len();
    let out = fsq.quantize(&Tensor::matrix(1, n, z).map_err(py_err)?).map_err(py_err)?;
    Ok(out.data().to_vec())
}

#[pyfunction]
fn cosine_warmup_lr(step: u64, base_lr: f64, warmup_steps: u64, total_steps: u64) -> PyResult<f64> {
    let s = Schedule::new(base_lr, warmup_steps, total_steps).map_err(py_err)?;
    graphgrad::cosine_warmup_lr(step, &s).map_err(py_err)
}

#[pyfunction]
fn normalized_score(ret: f64, reference: f64) -> PyResult<f64> {
    pipeline::normalized_score(ret, reference).map_err(py_err)
}

/// Results CSV rows as dicts keyed by column name; empty cells are None.
#[pyfunction]
fn read_results(py: Python<'_>, path: PathBuf) -> PyResult<Vec<Py<PyAny>>> {
    let table = pipeline::ResultsTable::read_csv(&path).map_err(py_err)?;
    let mut out = Vec::with_capacity(table.len());
    for r in table.rows() {
        let d = pyo3::types::PyDict::new(py);
        d.set_item("method", &r.method)?;
        d.set_item("budget", r.budget)?;
        d.set_item("d_z", r.d_z)?;
        d.set_item("seed", r.seed)?;
        d.set_item("probe_mse_z", r.probe_mse_z)?;
        d.set_item("probe_mse_h_action", r.probe_mse_h_action)?;
        d.set_item("probe_mse_h_distractor", r.probe_mse_h_distractor)?;
        d.set_item("return_mean", r.return_mean)?;
        d.set_item("return_std", r.return_std)?;
        d.set_item("norm_score", r.norm_score)?;
        d.set_item("eval_pool_action_mse", r.eval_pool_action_mse)?;
        out.push(d.into_any().unbind());
    }
    Ok(out)
}

#[pyfunction]
fn plot(results: PathBuf, kind: &str, out: PathBuf) -> PyResult<()> {
    let table = pipeline::ResultsTable::read_csv(&results).map_err(py_err)?;
    let kind = pipeline::PlotKind::parse(kind).map_err(py_err)?;
    pipeline::write_plot(&table, kind, &out).map_err(py_err)
}

#[pymodule]
fn latentlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyLamModel>()?;
    m.add_function(wrap_pyfunction!(train_lam, m)?)?;
    m.add_function(wrap_pyfunction!(fsq_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_warmup_lr, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_score, m)?)?;
    m.add_function(wrap_pyfunction!(read_results, m)?)?;
    m.add_function(wrap_pyfunction!(plot, m)?)?;
    Ok(())
}
