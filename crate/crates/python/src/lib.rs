//! Python bindings: datasets, configs, training, evaluation, samplers and the
//! variance utilities.

use std::collections::BTreeMap;
use std::path::PathBuf;

use lwgcn_core::artifacts::{self, Snapshot};
use lwgcn_core::estimator::predict as predict_logits;
use lwgcn_core::graph::{load_dataset, DatasetFormat, NormalizedGraph, RawDataset, SyntheticSpec};
use lwgcn_core::sampler::{
    adaptive_layer_sample, iid_layer_sample, node_wise_sample, LayerPlan, NodeWiseMode, SamplerParams, Strategy,
};
use lwgcn_core::selftest::{self, SelftestOptions};
use lwgcn_core::tensor::{DenseMatrix, SparseMatrix};
use lwgcn_core::trainer::{evaluate, train, EpochRecord, TrainingData};
use lwgcn_core::{variance, Error};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList, PyTuple};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A node-classification dataset.
#[pyclass(name = "Dataset", module = "lwgcn", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    raw: RawDataset,
}

#[pymethods]
impl PyDataset {
    /// Loads and validates a dataset directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_dataset(&path, DatasetFormat::Directory)
            .map(|raw| Self { raw })
            .map_err(to_py)
    }

    /// Synthetic graph with planted classes; `preset` is `small` or `cora`.
    #[staticmethod]
    #[pyo3(signature = (preset = "small", seed = 0))]
    fn synthetic(preset: &str, seed: u64) -> PyResult<Self> {
        let spec = match preset {
            "small" => SyntheticSpec {
                seed,
                ..Default::default()
            },
            "cora" => SyntheticSpec::cora_like(seed),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        spec.generate().map(|raw| Self { raw }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        self.raw.save(&path).map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.raw.validate().map_err(to_py)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.raw.num_nodes
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.raw.unique_edges().len()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.raw.feature_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.raw.num_classes
    }

    #[getter]
    fn labels(&self) -> Vec<Option<usize>> {
        self.raw.labels.clone()
    }

    #[getter]
    fn splits(&self) -> BTreeMap<&'static str, Vec<usize>> {
        let s = &self.raw.splits;
        BTreeMap::from([
            ("train", s.train.clone()),
            ("val", s.val.clone()),
            ("test", s.test.clone()),
        ])
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.raw.unique_edges().into_iter().collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(nodes={}, edges={}, features={}, classes={})",
            self.raw.num_nodes,
            self.raw.unique_edges().len(),
            self.raw.feature_dim(),
            self.raw.num_classes
        )
    }
}

fn json_of(value: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    use serde_json::Value;
    if value.is_none() {
        return Ok(Value::Null);
    }
    if let Ok(b) = value.extract::<bool>() {
        return Ok(Value::Bool(b));
    }
    if let Ok(i) = value.extract::<i64>() {
        return Ok(Value::from(i));
    }
    if let Ok(f) = value.extract::<f64>() {
        return Ok(Value::from(f));
    }
    if let Ok(s) = value.extract::<String>() {
        return Ok(Value::String(s));
    }
    if let Ok(list) = value.cast::<PyList>() {
        return list
            .iter()
            .map(|v| json_of(&v))
            .collect::<PyResult<Vec<_>>>()
            .map(Value::Array);
    }
    if let Ok(tuple) = value.cast::<PyTuple>() {
        return tuple
            .iter()
            .map(|v| json_of(&v))
            .collect::<PyResult<Vec<_>>>()
            .map(Value::Array);
    }
    Err(PyValueError::new_err(format!("unsupported config value {value}")))
}

/// Training configuration; keyword arguments override the defaults.
#[pyclass(name = "TrainConfig", module = "lwgcn", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: lwgcn_core::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut value = serde_json::to_value(lwgcn_core::TrainConfig::default()).map_err(|e| to_py(e.into()))?;
        if let Some(kwargs) = kwargs {
            for (k, v) in kwargs.iter() {
                value[k.extract::<String>()?] = json_of(&v)?;
            }
        }
        let inner: lwgcn_core::TrainConfig =
            serde_json::from_value(value).map_err(|e| PyValueError::new_err(format!("configuration error: {e}")))?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        lwgcn_core::TrainConfig::from_toml_str(text)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    #[getter]
    fn sampler(&self) -> &'static str {
        self.inner.sampler.id()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn resolved_lambda(&self) -> f64 {
        self.inner.resolved_lambda()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({:?})", self.inner)
    }
}

/// Trained parameters with the settings of the run that produced them.
#[pyclass(name = "Model", module = "lwgcn", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    snapshot: Snapshot,
}

impl PyModel {
    fn prepared(&self, dataset: &PyDataset) -> PyResult<TrainingData> {
        let data = TrainingData::prepare(&dataset.raw, &self.snapshot.config).map_err(to_py)?;
        if data.inputs.feature_dim() != self.snapshot.feature_dim {
            return Err(PyValueError::new_err(format!(
                "model expects {} features, dataset has {}",
                self.snapshot.feature_dim,
                data.inputs.feature_dim()
            )));
        }
        Ok(data)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Snapshot::load(&path).map(|snapshot| Self { snapshot }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.snapshot.save(&path).map_err(to_py)
    }

    /// Logits of every node under the exact forward pass.
    fn predict(&self, dataset: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
        let data = self.prepared(dataset)?;
        let options = self.snapshot.config.forward_options(data.num_nodes());
        let logits = predict_logits(&data.inputs, &self.snapshot.params, &options).map_err(to_py)?;
        Ok((0..logits.rows()).map(|r| logits.row(r).to_vec()).collect())
    }

    /// Accuracy on `split` (`train`, `val` or `test`).
    #[pyo3(signature = (dataset, split = "test"))]
    fn evaluate(&self, dataset: &PyDataset, split: &str) -> PyResult<f64> {
        let data = self.prepared(dataset)?;
        let idx = match split {
            "train" => &data.splits.train,
            "val" => &data.splits.val,
            "test" => &data.splits.test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let options = self.snapshot.config.forward_options(data.num_nodes());
        evaluate(&self.snapshot.params, &data.inputs, &options, &data.labels, idx).map_err(to_py)
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.snapshot.best_epoch
    }

    #[getter]
    fn best_val_acc(&self) -> f64 {
        self.snapshot.best_val_acc
    }

    /// Filter matrices, bottom layer first, as nested lists.
    #[getter]
    fn filters(&self) -> Vec<Vec<Vec<f64>>> {
        self.snapshot
            .params
            .gcn
            .filters
            .iter()
            .map(|w| (0..w.rows()).map(|r| w.row(r).to_vec()).collect())
            .collect()
    }
}

fn record_dict<'py>(py: Python<'py>, r: &EpochRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("loss_c", r.loss_c)?;
    d.set_item("loss_var", r.loss_var)?;
    d.set_item("loss_total", r.loss_total)?;
    d.set_item("val_acc", r.val_acc)?;
    d.set_item("test_acc", r.test_acc)?;
    d.set_item("seconds", r.seconds)?;
    d.set_item("nodes_sampled", r.nodes_sampled)?;
    Ok(d)
}

/// Trains a model; returns `(model, history)` with one dict per epoch.
#[pyfunction(name = "train")]
fn py_train<'py>(
    py: Python<'py>,
    config: &PyTrainConfig,
    dataset: &PyDataset,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let config = config.inner.clone();
    let raw = dataset.raw.clone();
    let outcome = py
        .detach(move || {
            let data = TrainingData::prepare(&raw, &config)?;
            let outcome = train(&config, &data, &mut |_| Ok(()))?;
            Ok::<_, Error>((config, outcome))
        })
        .map_err(to_py)?;
    let (config, outcome) = outcome;
    let history = outcome
        .history
        .iter()
        .map(|r| record_dict(py, r))
        .collect::<PyResult<_>>()?;
    let snapshot = Snapshot::new(&config, outcome.params, outcome.best_epoch, outcome.best_val_acc);
    Ok((PyModel { snapshot }, history))
}

/// Renormalised adjacency operator of an undirected graph.
#[pyclass(name = "Graph", module = "lwgcn", skip_from_py_object)]
struct PyGraph {
    inner: NormalizedGraph,
}

#[pymethods]
impl PyGraph {
    #[new]
    fn new(num_nodes: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        if let Some(&(u, v)) = edges.iter().find(|(u, v)| *u >= num_nodes || *v >= num_nodes) {
            return Err(PyValueError::new_err(format!("edge ({u}, {v}) out of range")));
        }
        Ok(Self {
            inner: NormalizedGraph::from_edges(num_nodes, &edges),
        })
    }

    #[staticmethod]
    fn from_dataset(dataset: &PyDataset) -> Self {
        let edges: Vec<_> = dataset.raw.unique_edges().into_iter().collect();
        Self {
            inner: NormalizedGraph::from_edges(dataset.raw.num_nodes, &edges),
        }
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    /// `(neighbours, operator values)` of row `v`, self loop included.
    fn neighbors(&self, v: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
        self.check(v)?;
        let (cols, vals) = self.inner.neighbors(v);
        Ok((cols.to_vec(), vals.to_vec()))
    }

    /// `p(u | v)` over the neighbourhood of `v`.
    fn conditional(&self, v: usize) -> PyResult<Vec<(usize, f64)>> {
        self.check(v)?;
        Ok(self.inner.conditional_row(v).collect())
    }

    /// Samples one layer for `parents`.
    ///
    /// `strategy` is `iid`, `adaptive` (needs `features` and `w_g`) or
    /// `node_wise` (draws `n` per parent). Returns a dict with the sampled
    /// nodes, their draw probabilities and the aggregation weights.
    #[pyo3(signature = (parents, n, strategy = "adaptive", seed = 0, features = None, w_g = None))]
    #[allow(clippy::too_many_arguments)]
    fn sample_layer<'py>(
        &self,
        py: Python<'py>,
        parents: Vec<usize>,
        n: usize,
        strategy: &str,
        seed: u64,
        features: Option<Vec<Vec<f64>>>,
        w_g: Option<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        for &v in &parents {
            self.check(v)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strategy: Strategy = strategy.parse().map_err(to_py)?;
        let layer: LayerPlan = match strategy {
            Strategy::Iid => iid_layer_sample(&self.inner, &parents, n, &mut rng),
            Strategy::NodeWise => node_wise_sample(&self.inner, &parents, n, NodeWiseMode::Uniform, &mut rng),
            Strategy::Adaptive => {
                let (Some(x), Some(w)) = (features, w_g) else {
                    return Err(PyValueError::new_err("the adaptive sampler needs features and w_g"));
                };
                let x = DenseMatrix::from_rows(&x).map_err(to_py)?;
                let params = SamplerParams::new(DenseMatrix::new(1, w.len(), w).map_err(to_py)?);
                adaptive_layer_sample(
                    &self.inner,
                    &parents,
                    &params,
                    &SparseMatrix::from_dense(&x),
                    n,
                    &mut rng,
                )
            }
            Strategy::Full => lwgcn_core::sampler::exhaustive_layer(&self.inner, &parents),
        }
        .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("sampled", layer.sampled.clone())?;
        d.set_item("q", layer.q.clone())?;
        let rows = layer.pattern.row_of_entries();
        let entries: Vec<(usize, usize, f64)> = rows
            .into_iter()
            .zip(layer.pattern.indices())
            .zip(layer.aggregation_weights())
            .map(|((r, &c), w)| (r, c, w))
            .collect();
        d.set_item("weights", entries)?;
        Ok(d)
    }
}

impl PyGraph {
    fn check(&self, v: usize) -> PyResult<()> {
        if v >= self.inner.num_nodes() {
            return Err(PyValueError::new_err(format!("node {v} out of range")));
        }
        Ok(())
    }
}

/// Exact variance of the `n`-draw importance estimate of `sum_u p(u) a(u)`.
#[pyfunction]
fn variance_exact(p: Vec<f64>, a: Vec<f64>, q: Vec<f64>, n: usize) -> PyResult<f64> {
    variance::variance_exact(&p, &a, &q, n).map_err(to_py)
}

/// The variance-minimising sampler, proportional to `p * a`.
#[pyfunction]
fn optimal_sampler(p: Vec<f64>, a: Vec<f64>) -> Vec<f64> {
    variance::optimal_sampler(&p, &a)
}

/// Sample variance of one set of draws.
#[pyfunction]
fn variance_empirical(p: Vec<f64>, a: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    variance::variance_empirical(&p, &a, &q).map_err(to_py)
}

/// Content hash of a dataset directory.
#[pyfunction]
fn dataset_hash(path: PathBuf) -> PyResult<String> {
    artifacts::dataset_hash(&path).map_err(to_py)
}

/// Runs the built-in oracle checks; returns one dict per check.
#[pyfunction(name = "selftest")]
#[pyo3(signature = (filter = None, seed = 7))]
fn py_selftest<'py>(py: Python<'py>, filter: Option<String>, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let options = SelftestOptions {
        filter,
        seed,
        ..Default::default()
    };
    let results = py.detach(|| selftest::run(&options));
    results
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("group", r.group)?;
            d.set_item("name", r.name)?;
            d.set_item("passed", r.passed)?;
            d.set_item("detail", r.detail)?;
            d.set_item("seconds", r.seconds)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn lwgcn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyGraph>()?;
    m.add_function(wrap_pyfunction!(py_train, m)?)?;
    m.add_function(wrap_pyfunction!(variance_exact, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_sampler, m)?)?;
    m.add_function(wrap_pyfunction!(variance_empirical, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_hash, m)?)?;
    m.add_function(wrap_pyfunction!(py_selftest, m)?)?;
    m.add("SAMPLERS", Strategy::ALL.iter().map(|s| s.id()).collect::<Vec<_>>())?;
    Ok(())
}
