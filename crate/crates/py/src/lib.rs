//! Python bindings for `repsub`.
//!
//! Images are passed as flat lists of floats in `[N, C, H, W]` order; the
//! shape travels separately.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use repsub::substitution::{layer_analysis, unit_seed};
use repsub::viz::emit_image;
use repsub::{Arch, Error, Objective, Split, SynthSpec, Tensor, TrainConfig, UnitRef, VizConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::NonFiniteObjective { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_split(split: &str) -> PyResult<Split> {
    match split {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!(
            "split must be 'train' or 'test', got {other:?}"
        ))),
    }
}

fn parse_objective(name: &str) -> PyResult<Objective> {
    name.parse().map_err(to_py)
}

fn batch_tensor(net: &repsub::Network, pixels: Vec<f32>) -> PyResult<Tensor> {
    let sample: usize = net.input_shape().iter().product();
    if pixels.is_empty() || !pixels.len().is_multiple_of(sample) {
        return Err(PyValueError::new_err(format!(
            "expected a multiple of {sample} values for inputs of shape {:?}, got {}",
            net.input_shape(),
            pixels.len()
        )));
    }
    let mut shape = vec![pixels.len() / sample];
    shape.extend_from_slice(net.input_shape());
    Tensor::new(shape, pixels).map_err(to_py)
}

/// A labelled image set.
#[pyclass(name = "Dataset", module = "repsub_py", frozen)]
struct PyDataset(repsub::Dataset);

#[pymethods]
impl PyDataset {
    /// Procedural bar-and-blob images, `per_class` of each class.
    #[staticmethod]
    #[pyo3(signature = (seed, classes=4, per_class=250, size=16, split="train"))]
    fn synth(
        seed: u64,
        classes: usize,
        per_class: usize,
        size: usize,
        split: &str,
    ) -> PyResult<Self> {
        let spec = SynthSpec::new(seed, classes, per_class, size);
        repsub::synth_dataset(spec, parse_split(split)?)
            .map(PyDataset)
            .map_err(to_py)
    }

    /// Loads the CIFAR-10 binary batches from `dir`, returning `(train, test)`.
    #[staticmethod]
    fn cifar10(dir: PathBuf) -> PyResult<(Self, Self)> {
        let (train, test) = repsub::load_cifar10(&dir).map_err(to_py)?;
        Ok((PyDataset(train), PyDataset(test)))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.0.class_count()
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.0.sample_shape().to_vec()
    }

    /// Pixels of sample `index` as a flat `[C, H, W]` list.
    fn image(&self, index: usize) -> PyResult<Vec<f32>> {
        if index >= self.0.len() {
            return Err(PyValueError::new_err(format!("index {index} out of range")));
        }
        Ok(self.0.images().sample(index).into_data())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, classes={}, shape={:?})",
            self.0.len(),
            self.0.class_count(),
            self.0.sample_shape()
        )
    }
}

/// A feed-forward network of convolution, dense, ReLU and pooling layers.
#[pyclass(name = "Network", module = "repsub_py")]
struct PyNetwork(repsub::Network);

#[pymethods]
impl PyNetwork {
    /// Builds an architecture preset (`cnn-desk`, `cnn-paper`, `mlp-desk`,
    /// `mlp-paper`) with He-initialized weights.
    #[staticmethod]
    #[pyo3(signature = (arch, input_shape, classes, seed=42))]
    fn build(arch: &str, input_shape: Vec<usize>, classes: usize, seed: u64) -> PyResult<Self> {
        let arch: Arch = arch.parse().map_err(to_py)?;
        arch.build(&input_shape, classes, seed)
            .map(PyNetwork)
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        repsub::load_checkpoint(&path).map(PyNetwork).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        repsub::save_checkpoint(&self.0, &path).map_err(to_py)
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.0.input_shape().to_vec()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.0.class_count()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    /// Units per analyzable layer.
    fn unit_counts(&self) -> Vec<usize> {
        self.0.unit_counts()
    }

    /// Copy of the network with one unit's output forced to zero.
    fn ablate(&self, layer: usize, unit: usize) -> PyResult<Self> {
        self.0
            .ablate_unit(UnitRef::new(layer, unit))
            .map(PyNetwork)
            .map_err(to_py)
    }

    /// Predicted class of each image in a flat batch.
    fn predict(&self, py: Python<'_>, pixels: Vec<f32>) -> PyResult<Vec<usize>> {
        let batch = batch_tensor(&self.0, pixels)?;
        py.detach(|| self.0.predict(&batch)).map_err(to_py)
    }

    /// Pooled activation of one unit for a single `[C, H, W]` image.
    fn unit_activation(&self, pixels: Vec<f32>, layer: usize, unit: usize) -> PyResult<f32> {
        let image = Tensor::new(self.0.input_shape().to_vec(), pixels).map_err(to_py)?;
        repsub::unit_activation(&self.0, &image, UnitRef::new(layer, unit)).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(input={:?}, units={:?}, classes={})",
            self.0.input_shape(),
            self.0.unit_counts(),
            self.0.class_count()
        )
    }
}

/// Trains in place with SGD and momentum. Returns `(epoch, loss, accuracy)`
/// per epoch.
#[pyfunction]
#[pyo3(signature = (net, data, epochs=20, batch=32, lr=0.05, momentum=0.9, seed=42))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    net: &mut PyNetwork,
    data: &PyDataset,
    epochs: usize,
    batch: usize,
    lr: f32,
    momentum: f32,
    seed: u64,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let cfg = TrainConfig {
        epochs,
        batch,
        lr,
        momentum,
        seed,
    };
    let history = py
        .detach(|| repsub::train(&mut net.0, &data.0, &cfg))
        .map_err(to_py)?;
    Ok(history
        .epochs
        .iter()
        .map(|e| (e.epoch, e.loss, e.accuracy))
        .collect())
}

#[pyfunction]
fn evaluate(py: Python<'_>, net: &PyNetwork, data: &PyDataset) -> PyResult<f64> {
    py.detach(|| repsub::evaluate(&net.0, &data.0))
        .map_err(to_py)
}

/// Class selectivity of one row of class-conditional mean activations.
#[pyfunction]
fn selectivity(row: Vec<f64>) -> PyResult<f64> {
    repsub::selectivity(&row).map_err(to_py)
}

/// Number of activations strictly greater than `acts[target]`.
#[pyfunction]
fn rs_count(acts: Vec<f32>, target: usize) -> PyResult<usize> {
    if target >= acts.len() {
        return Err(PyValueError::new_err(format!(
            "target {target} out of range"
        )));
    }
    Ok(repsub::rs_count(&acts, target))
}

#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    repsub::spearman(&xs, &ys).map_err(to_py)
}

/// Gradient-ascent image for one unit. Returns a dict with `image` (flat),
/// `shape`, `trace` and `best_iter`. `ppm` writes the image as well.
#[pyfunction]
#[pyo3(signature = (net, layer, unit, objective="am", steps=256, step_size=0.1, seed=42, restarts=1, ppm=None))]
#[allow(clippy::too_many_arguments)]
fn generate<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    layer: usize,
    unit: usize,
    objective: &str,
    steps: usize,
    step_size: f32,
    seed: u64,
    restarts: usize,
    ppm: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = VizConfig {
        steps,
        step_size,
        init_seed: seed,
        restarts,
        objective: parse_objective(objective)?,
        ..VizConfig::default()
    };
    let target = UnitRef::new(layer, unit);
    let img = py
        .detach(|| repsub::generate(&net.0, target, &cfg))
        .map_err(to_py)?;
    if let Some(path) = ppm {
        emit_image(&img, &path).map_err(to_py)?;
    }
    let out = PyDict::new(py);
    out.set_item("shape", img.image.shape().to_vec())?;
    out.set_item("trace", img.objective_trace.clone())?;
    out.set_item("best_iter", img.best_iter)?;
    out.set_item("image", img.image.into_data())?;
    Ok(out)
}

/// Selectivity, AM/IAM RS and ablation delta of every unit in `layer`, as
/// a list of dicts.
#[pyfunction]
#[pyo3(signature = (net, data, layer, steps=256, step_size=0.1, seed=42, restarts=1))]
#[allow(clippy::too_many_arguments)]
fn layer_profile<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    data: &PyDataset,
    layer: usize,
    steps: usize,
    step_size: f32,
    seed: u64,
    restarts: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = VizConfig {
        steps,
        step_size,
        init_seed: seed,
        restarts,
        ..VizConfig::default()
    };
    let units = py
        .detach(|| layer_analysis(&net.0, &data.0, layer, &cfg))
        .map_err(to_py)?;
    units
        .iter()
        .map(|a| {
            let r = &a.report;
            let d = PyDict::new(py);
            d.set_item("layer", r.unit.layer)?;
            d.set_item("unit", r.unit.unit)?;
            d.set_item("selectivity", r.selectivity)?;
            d.set_item("rs_am", r.rs_am)?;
            d.set_item("rs_iam", r.rs_iam)?;
            d.set_item("ablation_delta", r.ablation_delta)?;
            d.set_item("seed", unit_seed(seed, r.unit))?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn repsub_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(selectivity, m)?)?;
    m.add_function(wrap_pyfunction!(rs_count, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(layer_profile, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_and_objective_names() {
        assert_eq!(parse_split("test").unwrap(), Split::Test);
        assert_eq!(parse_objective("IAM").unwrap(), Objective::Iam);
    }

    #[test]
    fn batch_size_must_divide() {
        let net = repsub::build_mlp(&[1, 2, 2], &[3], 2, 0).unwrap();
        assert_eq!(
            batch_tensor(&net, vec![0.0; 8]).unwrap().shape(),
            [2, 1, 2, 2]
        );
    }
}
