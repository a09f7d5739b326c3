//! Python bindings: datasets, residual and feedforward nets, training,
//! lesion studies, gradient flow and path statistics.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use unravel_core::checkpoint;
use unravel_core::data;
use unravel_core::desk;
use unravel_core::gradflow;
use unravel_core::lesion::{self, LesionReport};
use unravel_core::numerics::Tensor;
use unravel_core::paths;
use unravel_core::resnet::{self, Architecture};
use unravel_core::training::{self, TrainConfig, TrainHistory};
use unravel_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite { .. } | Error::Divergence { .. } | Error::Tape(_) | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Tensor::new(n, cols, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[pyclass(name = "Dataset", skip_from_py_object)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> PyResult<Self> {
        let inner = data::Dataset::new(tensor(features)?, labels, classes).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.features)
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    /// Error of label-independent guessing, `1 - sum(p_c^2)`.
    fn chance_error(&self) -> f64 {
        self.inner.chance_error()
    }

    fn save_csv(&self, path: &str) -> PyResult<()> {
        self.inner.save_csv(path).map_err(py_err)
    }
}

#[pyfunction]
fn gen_spirals(points_per_class: usize, classes: usize, noise: f64, seed: u64) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: data::gen_spirals(points_per_class, classes, noise, seed).map_err(py_err)? })
}

#[pyfunction]
fn load_csv(path: &str) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: data::load_csv(path).map_err(py_err)? })
}

/// The spiral task as `(train, test)`.
#[pyfunction]
fn desk_task(seed: u64) -> PyResult<(PyDataset, PyDataset)> {
    let (tr, te) = data::desk_task(seed).map_err(py_err)?;
    Ok((PyDataset { inner: tr }, PyDataset { inner: te }))
}

#[pyclass(name = "TrainConfig", get_all, set_all, skip_from_py_object)]
struct PyTrainConfig {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    lr_decay: f64,
    milestones: Vec<usize>,
    momentum: f64,
    weight_decay: f64,
    seed: u64,
}

impl PyTrainConfig {
    fn from_core(c: TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            lr_decay: c.lr_decay,
            milestones: c.milestones,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            seed: c.seed,
        }
    }

    fn core(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay,
            milestones: self.milestones.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

#[pymethods]
impl PyTrainConfig {
    /// The reference recipe (lr 0.02, 100 epochs, batch 128).
    #[new]
    #[pyo3(signature = (seed, epochs = None))]
    fn new(seed: u64, epochs: Option<usize>) -> Self {
        let mut c = desk::train_config(seed);
        if let Some(e) = epochs {
            c.milestones = vec![e / 2, e * 3 / 4];
            c.epochs = e;
        }
        Self::from_core(c)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.core())
    }
}

#[pyclass(name = "ResidualNet", skip_from_py_object)]
struct PyResidualNet {
    inner: resnet::ResidualNet,
}

#[pymethods]
impl PyResidualNet {
    /// Uniform-width net of `n` blocks, initialized from `seed`.
    #[new]
    #[pyo3(signature = (input_dim, classes, n = desk::BLOCKS, width = desk::WIDTH, seed = 0))]
    fn new(input_dim: usize, classes: usize, n: usize, width: usize, seed: u64) -> PyResult<Self> {
        let arch = Architecture::uniform(input_dim, classes, n, width);
        Ok(Self { inner: desk::residual_net(&arch, seed).map_err(py_err)? })
    }

    /// Widths 16/32/64 with projection transitions.
    #[staticmethod]
    #[pyo3(signature = (input_dim, classes, blocks_per_stage, seed = 0))]
    fn three_stage(input_dim: usize, classes: usize, blocks_per_stage: usize, seed: u64) -> PyResult<Self> {
        let arch = Architecture::three_stage(input_dim, classes, blocks_per_stage);
        Ok(Self { inner: desk::residual_net(&arch, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load_residual(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save_residual(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn transition_indices(&self) -> Vec<usize> {
        self.inner.transition_indices()
    }

    fn standard_indices(&self) -> Vec<usize> {
        self.inner.standard_indices()
    }

    /// Eval-mode logits for rows of `x`.
    fn logits(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        use resnet::Network;
        Ok(rows(&self.inner.logits(&tensor(x)?).map_err(py_err)?))
    }

    fn evaluate(&self, data: &PyDataset) -> PyResult<f64> {
        lesion::evaluate(&self.inner, &data.inner).map_err(py_err)
    }

    fn delete_blocks(&self, indices: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.delete_blocks(&indices).map_err(py_err)? })
    }

    fn permute_blocks(&self, perm: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.permute_blocks(&perm).map_err(py_err)? })
    }
}

#[pyclass(name = "FeedforwardNet", skip_from_py_object)]
struct PyFeedforwardNet {
    inner: resnet::FeedforwardNet,
}

#[pymethods]
impl PyFeedforwardNet {
    #[new]
    #[pyo3(signature = (input_dim, classes, layers = desk::FEEDFORWARD_LAYERS, width = desk::WIDTH, seed = 0))]
    fn new(input_dim: usize, classes: usize, layers: usize, width: usize, seed: u64) -> PyResult<Self> {
        let mut rng = unravel_core::rng::stream_rng(seed, desk::INIT_STREAM);
        Ok(Self { inner: resnet::FeedforwardNet::new(input_dim, classes, layers, width, &mut rng).map_err(py_err)? })
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    fn evaluate(&self, data: &PyDataset) -> PyResult<f64> {
        lesion::evaluate(&self.inner, &data.inner).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save_feedforward(&self.inner, path).map_err(py_err)
    }
}

type HistoryRow = (usize, f64, f64, f64);

fn history(h: TrainHistory) -> Vec<HistoryRow> {
    h.epochs.into_iter().map(|e| (e.epoch, e.train_loss, e.train_err, e.test_err)).collect()
}

/// Plain training. Returns the trained net and `(epoch, train_loss,
/// train_err, test_err)` rows.
#[pyfunction]
fn train(py: Python<'_>, net: &PyResidualNet, train: &PyDataset, test: &PyDataset, config: &PyTrainConfig) -> PyResult<(PyResidualNet, Vec<HistoryRow>)> {
    let (net, cfg) = (net.inner.clone(), config.core());
    let (n, h) = py.detach(|| training::train(net, &train.inner, &test.inner, &cfg)).map_err(py_err)?;
    Ok((PyResidualNet { inner: n }, history(h)))
}

#[pyfunction]
fn train_feedforward(
    py: Python<'_>,
    net: &PyFeedforwardNet,
    train: &PyDataset,
    test: &PyDataset,
    config: &PyTrainConfig,
) -> PyResult<(PyFeedforwardNet, Vec<HistoryRow>)> {
    let (net, cfg) = (net.inner.clone(), config.core());
    let (n, h) = py.detach(|| training::train(net, &train.inner, &test.inner, &cfg)).map_err(py_err)?;
    Ok((PyFeedforwardNet { inner: n }, history(h)))
}

/// Each batch trains a random subset of exactly `m` blocks.
#[pyfunction]
fn train_effective_paths(
    py: Python<'_>,
    net: &PyResidualNet,
    train: &PyDataset,
    test: &PyDataset,
    config: &PyTrainConfig,
    m: usize,
) -> PyResult<(PyResidualNet, Vec<HistoryRow>)> {
    let (net, cfg) = (net.inner.clone(), config.core());
    let (n, h) = py
        .detach(|| training::train_effective_paths(net, &train.inner, &test.inner, &cfg, m))
        .map_err(py_err)?;
    Ok((PyResidualNet { inner: n }, history(h)))
}

/// Stochastic depth with survival decaying linearly to `survival_final`.
#[pyfunction]
#[pyo3(signature = (net, train, test, config, survival_final = 0.5))]
fn train_stochastic_depth(
    py: Python<'_>,
    net: &PyResidualNet,
    train: &PyDataset,
    test: &PyDataset,
    config: &PyTrainConfig,
    survival_final: f64,
) -> PyResult<(PyResidualNet, Vec<HistoryRow>)> {
    let (net, cfg) = (net.inner.clone(), config.core());
    let survival = training::linear_survival(net.n(), survival_final);
    let (n, h) = py
        .detach(|| training::train_stochastic_depth(net, &train.inner, &test.inner, &cfg, &survival))
        .map_err(py_err)?;
    Ok((PyResidualNet { inner: n }, history(h)))
}

/// `(baseline_error, [error after deleting block i])`.
#[pyfunction]
fn lesion_single(net: &PyResidualNet, data: &PyDataset) -> PyResult<(f64, Vec<f64>)> {
    let r = lesion::lesion_single(&net.inner, &data.inner).map_err(py_err)?;
    Ok((r.baseline_error, r.rows.iter().map(|r| r.error).collect()))
}

#[pyfunction]
fn lesion_single_feedforward(net: &PyFeedforwardNet, data: &PyDataset) -> PyResult<(f64, Vec<f64>)> {
    let r = lesion::lesion_single(&net.inner, &data.inner).map_err(py_err)?;
    Ok((r.baseline_error, r.rows.iter().map(|r| r.error).collect()))
}

/// Rows `(k_deleted, trial, error)`.
#[pyfunction]
fn lesion_multi(net: &PyResidualNet, data: &PyDataset, ks: Vec<usize>, trials: usize, seed: u64) -> PyResult<Vec<(usize, usize, f64)>> {
    let r = lesion::lesion_multi(&net.inner, &data.inner, &ks, trials, seed).map_err(py_err)?;
    Ok(r.rows.iter().map(|r| (r.deleted.len(), r.trial, r.error)).collect())
}

/// Rows `(num_swaps, trial, tau, error)`.
#[pyfunction]
#[pyo3(signature = (net, data, swap_counts, trials, seed, stage_local = false))]
fn reorder_experiment(
    net: &PyResidualNet,
    data: &PyDataset,
    swap_counts: Vec<usize>,
    trials: usize,
    seed: u64,
    stage_local: bool,
) -> PyResult<Vec<(usize, usize, f64, f64)>> {
    let r: LesionReport = lesion::reorder_experiment(&net.inner, &data.inner, &swap_counts, trials, seed, stage_local).map_err(py_err)?;
    Ok(r.rows
        .iter()
        .map(|r| (r.num_swaps.unwrap_or(0), r.trial, r.tau.unwrap_or(1.0), r.error))
        .collect())
}

/// Rows `(k, mean_norm, std_norm, mean_log2_norm)`, plus the correlation
/// between `k` and the mean log2 norm.
#[pyfunction]
#[pyo3(signature = (net, data, lengths, samples = 100, batch_size = desk::BATCH_SIZE, seed = 0))]
fn gradient_profile(
    net: &PyResidualNet,
    data: &PyDataset,
    lengths: Vec<usize>,
    samples: usize,
    batch_size: usize,
    seed: u64,
) -> PyResult<(Vec<(usize, f64, f64, f64)>, f64)> {
    let plan = gradflow::SamplingPlan::new(samples, batch_size, seed);
    let p = gradflow::gradient_profile(&net.inner, &data.inner, &lengths, &plan).map_err(py_err)?;
    let r = p.log_norm_correlation();
    Ok((p.lengths.iter().map(|s| (s.k, s.mean_norm, s.std_norm, s.mean_log2_norm)).collect(), r))
}

#[pyfunction]
fn num_paths(n: usize) -> PyResult<u64> {
    paths::num_paths(n).map_err(py_err)
}

#[pyfunction]
fn path_length_pmf(n: usize) -> Vec<f64> {
    paths::path_length_pmf(n).pmf
}

#[pyfunction]
fn remaining_fraction(n: usize, d: usize, x: usize) -> PyResult<f64> {
    paths::remaining_fraction(n, d, x).map_err(py_err)
}

#[pyfunction]
fn effective_fraction(n: usize, k_lo: usize, k_hi: usize) -> PyResult<f64> {
    paths::effective_fraction(&paths::path_length_pmf(n), k_lo, k_hi).map_err(py_err)
}

#[pyfunction]
fn kendall_tau(perm: Vec<usize>) -> PyResult<f64> {
    paths::kendall_tau(&perm).map_err(py_err)
}

#[pyfunction]
fn choose_subset_size(n: usize, band: (usize, usize)) -> PyResult<usize> {
    training::choose_subset_size(n, band).map_err(py_err)
}

#[pymodule]
fn unravel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyResidualNet>()?;
    m.add_class::<PyFeedforwardNet>()?;
    m.add_function(wrap_pyfunction!(gen_spirals, m)?)?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(desk_task, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(train_feedforward, m)?)?;
    m.add_function(wrap_pyfunction!(train_effective_paths, m)?)?;
    m.add_function(wrap_pyfunction!(train_stochastic_depth, m)?)?;
    m.add_function(wrap_pyfunction!(lesion_single, m)?)?;
    m.add_function(wrap_pyfunction!(lesion_single_feedforward, m)?)?;
    m.add_function(wrap_pyfunction!(lesion_multi, m)?)?;
    m.add_function(wrap_pyfunction!(reorder_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_profile, m)?)?;
    m.add_function(wrap_pyfunction!(num_paths, m)?)?;
    m.add_function(wrap_pyfunction!(path_length_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(remaining_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(effective_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau, m)?)?;
    m.add_function(wrap_pyfunction!(choose_subset_size, m)?)?;
    Ok(())
}
