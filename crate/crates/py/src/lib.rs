//! Python bindings: models, datasets, selection, CKA and whole experiments.

use fedsim::data::{self, ClientPartition, PartitionSpec, SyntheticSpec};
use fedsim::experiment::ExperimentConfig;
use fedsim::federation::{self, ClientUpdate, RoundReport};
use fedsim::{selection, FedError, Tensor2};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn err(e: FedError) -> PyErr {
    match e {
        FedError::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor2> {
    Tensor2::from_rows(&rows).map_err(err)
}

fn nested(t: &Tensor2) -> Vec<Vec<f64>> {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

fn partition(client_id: usize, indices: Vec<usize>) -> ClientPartition {
    ClientPartition {
        client_id,
        sample_indices: indices,
    }
}

/// A multilayer perceptron split into a frozen feature extractor and a
/// trainable head.
#[pyclass(name = "Model", module = "fedsim", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: fedsim::Model,
}

#[pymethods]
impl PyModel {
    /// Dense and ReLU layers with the given widths, input first and classes
    /// last. `split_index` defaults to training only the last layer.
    #[new]
    #[pyo3(signature = (widths, seed, split_index = None))]
    fn new(widths: Vec<usize>, seed: u64, split_index: Option<usize>) -> PyResult<Self> {
        let mut inner = fedsim::Model::mlp(&widths, 0, seed).map_err(err)?;
        let split = split_index.unwrap_or_else(|| inner.classifier_split());
        inner.set_split_index(split).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        fedsim::Model::load(path)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        fedsim::Model::from_bytes(data)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn logits(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.logits(&tensor(features)?).map_err(err)?;
        Ok(nested(&out))
    }

    #[pyo3(signature = (features, rho = 1.0))]
    fn predict_proba(&self, features: Vec<Vec<f64>>, rho: f64) -> PyResult<Vec<Vec<f64>>> {
        let logits = self.inner.logits(&tensor(features)?).map_err(err)?;
        Ok(nested(&fedsim::softmax_rows(&logits, rho).map_err(err)?))
    }

    /// Accuracy and mean cross-entropy on a dataset.
    fn evaluate(&self, dataset: &PyDataset) -> PyResult<(f64, f64)> {
        federation::evaluate(&self.inner, &dataset.inner).map_err(err)
    }

    fn theta(&self) -> Vec<f64> {
        self.inner.theta()
    }

    fn phi(&self) -> Vec<f64> {
        self.inner.phi()
    }

    fn set_theta(&mut self, theta: Vec<f64>) -> PyResult<()> {
        self.inner.set_theta(&theta).map_err(err)
    }

    #[getter]
    fn split_index(&self) -> usize {
        self.inner.split_index()
    }

    #[setter]
    fn set_split_index(&mut self, split_index: usize) -> PyResult<()> {
        self.inner.set_split_index(split_index).map_err(err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn input_width(&self) -> usize {
        self.inner.input_width()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(layers={}, split_index={}, params={})",
            self.inner.layers().len(),
            self.inner.split_index(),
            self.inner.param_count()
        )
    }
}

/// Labelled feature vectors.
#[pyclass(name = "Dataset", module = "fedsim", from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, num_classes, name = "dataset"))]
    fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
        name: &str,
    ) -> PyResult<Self> {
        data::Dataset::new(tensor(features)?, labels, num_classes, name)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// Gaussian blobs, one per class, means on a sphere of radius `class_separation`.
    #[staticmethod]
    #[pyo3(signature = (num_classes, samples_per_class, feature_dim, class_separation, seed))]
    fn synthetic(
        num_classes: usize,
        samples_per_class: usize,
        feature_dim: usize,
        class_separation: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SyntheticSpec {
            num_classes,
            samples_per_class,
            feature_dim,
            class_separation,
            seed,
        };
        data::generate_synthetic(&spec)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// Reads the binary format, or CSV when the extension is `.csv`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        fedsim::experiment::load_any(path.as_ref())
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn features(&self) -> Vec<Vec<f64>> {
        nested(self.inner.features())
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    /// Per-class Dirichlet split into `num_clients` lists of sample indices.
    fn partition(&self, num_clients: usize, alpha: f64, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        let spec = PartitionSpec {
            num_clients,
            alpha,
            seed,
        };
        let parts = data::dirichlet_partition(&self.inner, &spec).map_err(err)?;
        Ok(parts.into_iter().map(|p| p.sample_indices).collect())
    }

    /// Stratified `(train, test)` split.
    fn split(&self, test_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (train, test) =
            data::stratified_split(&self.inner, test_fraction, seed).map_err(err)?;
        Ok((Self { inner: train }, Self { inner: test }))
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, samples={}, classes={}, dim={})",
            self.inner.name(),
            self.inner.len(),
            self.inner.num_classes(),
            self.inner.feature_dim()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (logits, rho = 1.0))]
fn softmax(logits: Vec<f64>, rho: f64) -> PyResult<Vec<f64>> {
    fedsim::softmax_with_temperature(&logits, rho).map_err(err)
}

/// Shannon entropy in nats.
#[pyfunction]
fn entropy(probs: Vec<f64>) -> PyResult<f64> {
    selection::compute_entropy(&probs).map_err(err)
}

/// Linear CKA between two representations of the same samples; `None` when undefined.
#[pyfunction]
fn linear_cka(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Option<f64>> {
    fedsim::linear_cka(&tensor(x)?, &tensor(y)?).map_err(err)
}

/// The `max(1, floor(p_ds n))` highest-entropy samples among `indices`, ascending.
#[pyfunction]
#[pyo3(signature = (model, dataset, indices, p_ds, rho = 0.1))]
fn select_by_entropy(
    model: &PyModel,
    dataset: &PyDataset,
    indices: Vec<usize>,
    p_ds: f64,
    rho: f64,
) -> PyResult<Vec<usize>> {
    let client = partition(0, indices);
    selection::select_by_entropy(&model.inner, &dataset.inner, &client, p_ds, rho)
        .map(|r| r.selected_indices)
        .map_err(err)
}

/// A seeded uniform sample of the same size as the entropy selection.
#[pyfunction]
#[pyo3(signature = (indices, p_ds, seed, client_id = 0))]
fn select_random(
    indices: Vec<usize>,
    p_ds: f64,
    seed: u64,
    client_id: usize,
) -> PyResult<Vec<usize>> {
    selection::select_random(&partition(client_id, indices), p_ds, seed)
        .map(|r| r.selected_indices)
        .map_err(err)
}

/// Sample-count weighted average of `(client_id, theta, sample_count)` uploads.
#[pyfunction]
fn aggregate(updates: Vec<(usize, Vec<f64>, usize)>) -> PyResult<Vec<f64>> {
    let updates: Vec<ClientUpdate> = updates
        .into_iter()
        .map(|(client_id, theta, selected_count)| ClientUpdate {
            client_id,
            theta,
            selected_count,
            train_time_seconds: 0.0,
            wall_seconds: 0.0,
        })
        .collect();
    federation::aggregate(&updates).map_err(err)
}

/// Best accuracy over total client training time.
#[pyfunction]
fn learning_efficiency(best_accuracy: f64, total_time: f64) -> Option<f64> {
    fedsim::analysis::efficiency_from(best_accuracy, total_time)
}

/// TOML text of a named preset, for editing and passing to `run_experiment`.
#[pyfunction]
fn preset_config(name: &str) -> PyResult<String> {
    ExperimentConfig::preset(name)
        .map(|c| c.to_toml())
        .map_err(err)
}

fn report_dict<'py>(py: Python<'py>, r: &RoundReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", r.round)?;
    d.set_item("participants", r.participating_clients.clone())?;
    d.set_item("test_acc", r.global_test_accuracy)?;
    d.set_item("test_loss", r.global_test_loss)?;
    d.set_item("cum_client_time_s", r.cumulative_client_train_time)?;
    d.set_item("cum_wall_time_s", r.cumulative_wall_time)?;
    d.set_item("selected_counts", r.selected_counts.clone())?;
    d.set_item("bytes_exchanged", r.bytes_exchanged)?;
    Ok(d)
}

/// Runs a complete experiment from TOML config text and returns a dict with
/// `reports` (one dict per round), `pretrained`, `final` and `efficiency`.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let config = ExperimentConfig::from_toml(config).map_err(err)?;
    config.validate().map_err(err)?;
    let (_, outcome) = py.detach(|| config.run()).map_err(err)?;
    let out = PyDict::new(py);
    let reports = outcome
        .reports
        .iter()
        .map(|r| report_dict(py, r))
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("reports", reports)?;
    out.set_item("efficiency", fedsim::learning_efficiency(&outcome.reports))?;
    out.set_item(
        "pretrained",
        PyModel {
            inner: outcome.pretrained,
        },
    )?;
    out.set_item(
        "final",
        PyModel {
            inner: outcome.final_model,
        },
    )?;
    Ok(out)
}

#[pymodule]
#[pyo3(name = "fedsim")]
fn fedsim_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(linear_cka, m)?)?;
    m.add_function(wrap_pyfunction!(select_by_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(select_random, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(learning_efficiency, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
