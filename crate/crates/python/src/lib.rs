//! Python bindings: point clouds, the routing and loss primitives, model
//! configs, and a model handle that trains, evaluates and decodes.

use std::path::PathBuf;

use pointcaps::data::{self, ShapeKind, Split, SyntheticSpec};
use pointcaps::model::{self, count_params_flops, ModelState};
use pointcaps::routing::{self, RoutingKind, RoutingSpec};
use pointcaps::tensor::{Tape, Tensor};
use pointcaps::train::{self, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: pointcaps::Error) -> PyErr {
    match e {
        pointcaps::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for pointcaps::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "PointCloud", module = "pointcaps_rs", from_py_object)]
#[derive(Clone)]
struct PyPointCloud {
    inner: data::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (points, label = 0))]
    fn new(points: Vec<[f64; 3]>, label: usize) -> PyResult<Self> {
        let inner = data::PointCloud::new(points, label);
        inner.validate().py()?;
        Ok(PyPointCloud { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPointCloud {
            inner: data::load_cloud(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_cloud(&self.inner, &path).py()
    }

    #[getter]
    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points.clone()
    }

    #[getter]
    fn label(&self) -> usize {
        self.inner.label
    }

    /// Part label per point; `None` for unknown parts.
    #[getter]
    fn parts(&self) -> Option<Vec<Option<usize>>> {
        self.inner.part_labels.clone()
    }

    /// Copy centred on the origin and scaled into the unit ball.
    fn normalized(&self) -> Self {
        PyPointCloud {
            inner: self.inner.clone().normalized(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud(points={}, label={})", self.inner.len(), self.inner.label)
    }
}

fn wrap(clouds: Vec<data::PointCloud>) -> Vec<PyPointCloud> {
    clouds.into_iter().map(|inner| PyPointCloud { inner }).collect()
}

fn unwrap(clouds: Vec<PyPointCloud>) -> Vec<data::PointCloud> {
    clouds.into_iter().map(|c| c.inner).collect()
}

#[pyfunction]
#[pyo3(signature = (kind, num_points, seed = 0))]
fn generate_shape(kind: &str, num_points: usize, seed: u64) -> PyResult<PyPointCloud> {
    let kind: ShapeKind = kind.parse().py()?;
    Ok(PyPointCloud {
        inner: data::generate_shape(kind, num_points, seed).py()?,
    })
}

/// `(train, test)` clouds of the five-class synthetic dataset.
#[pyfunction]
#[pyo3(signature = (num_points, train_per_class, test_per_class, seed = 0))]
fn synthesize(
    num_points: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> PyResult<(Vec<PyPointCloud>, Vec<PyPointCloud>)> {
    let spec = SyntheticSpec::new(num_points, train_per_class, test_per_class, seed);
    Ok((
        wrap(data::synthesize(&spec, Split::Train).py()?),
        wrap(data::synthesize(&spec, Split::Test).py()?),
    ))
}

#[pyfunction]
#[pyo3(signature = (cloud, sigma, seed = 0))]
fn perturb_gaussian(cloud: &PyPointCloud, sigma: f64, seed: u64) -> PyResult<PyPointCloud> {
    Ok(PyPointCloud {
        inner: data::perturb_gaussian(&cloud.inner, sigma, seed).py()?,
    })
}

#[pyfunction]
#[pyo3(signature = (cloud, count, sigma = 0.2, seed = 0))]
fn add_outliers(cloud: &PyPointCloud, count: usize, sigma: f64, seed: u64) -> PyResult<PyPointCloud> {
    Ok(PyPointCloud {
        inner: data::add_outliers(&cloud.inner, count, sigma, seed).py()?,
    })
}

/// Symmetric Chamfer distance between two point sets.
#[pyfunction]
fn chamfer(x: Vec<[f64; 3]>, y: Vec<[f64; 3]>) -> PyResult<f64> {
    model::chamfer(&x, &y).py()
}

#[pyfunction]
fn squash(v: Vec<f64>) -> PyResult<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([v.len()], v).py()?);
    let y = tape.squash(x).py()?;
    Ok(tape.value(y).data().to_vec())
}

#[pyfunction]
#[pyo3(signature = (lengths, label, m_plus = 0.9, m_minus = 0.1, lam = 0.5))]
fn margin_loss(lengths: Vec<f64>, label: usize, m_plus: f64, m_minus: f64, lam: f64) -> PyResult<f64> {
    model::margin_loss(&lengths, label, m_plus, m_minus, lam).py()
}

type Nested = Vec<Vec<Vec<f64>>>;

/// Routes votes `[ci][cp][d]` and returns `(parents, logits, couplings)`.
/// `kind` is `"er"` (Euclidean) or `"dr"` (dot product).
#[pyfunction]
#[pyo3(signature = (votes, iterations = 3, kind = "er"))]
fn route(votes: Nested, iterations: usize, kind: &str) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let kind: RoutingKind = kind.parse().py()?;
    let ci = votes.len();
    let cp = votes.first().map_or(0, |v| v.len());
    let d = votes.first().and_then(|v| v.first()).map_or(0, |v| v.len());
    let flat: Vec<f64> = votes.iter().flatten().flatten().copied().collect();
    if ci == 0 || cp == 0 || d == 0 || flat.len() != ci * cp * d {
        return Err(PyValueError::new_err("votes must be a non-empty, rectangular [ci][cp][d] list"));
    }
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new([ci, cp, d], flat).py()?);
    let r = routing::route(&mut tape, v, &RoutingSpec::new(kind, iterations)).py()?;
    let rows = |t: &Tensor, w: usize| t.data().chunks(w).map(<[f64]>::to_vec).collect();
    Ok((
        rows(tape.value(r.parents), d),
        rows(tape.value(r.logits), cp),
        rows(tape.value(r.couplings), cp),
    ))
}

#[pyclass(name = "ModelConfig", module = "pointcaps_rs", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[staticmethod]
    fn micro(num_points: usize, num_classes: usize) -> Self {
        PyModelConfig {
            inner: model::ModelConfig::micro(num_points, num_classes),
        }
    }

    #[staticmethod]
    fn tiny(num_points: usize, num_classes: usize) -> Self {
        PyModelConfig {
            inner: model::ModelConfig::tiny(num_points, num_classes),
        }
    }

    #[staticmethod]
    fn paper(num_points: usize, num_classes: usize) -> Self {
        PyModelConfig {
            inner: model::ModelConfig::paper(num_points, num_classes),
        }
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyModelConfig {
            inner: model::ModelConfig::from_text(text, "<python>".as_ref()).py()?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Sets one `key = value` entry, e.g. `set("routing_mode", "all_dr")`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.apply(key, value).py()?;
        next.validate().py()?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn num_points(&self) -> usize {
        self.inner.num_points
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.digit_dim
    }

    /// `(parameters, multiply-adds)` of one forward pass.
    fn complexity(&self) -> (usize, usize) {
        let c = count_params_flops(&self.inner);
        (c.params, c.flops)
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(num_points={}, num_classes={}, routing_mode={}, skip={})",
            self.inner.num_points, self.inner.num_classes, self.inner.routing_mode, self.inner.skip_connection
        )
    }
}

#[pyclass(name = "Model", module = "pointcaps_rs")]
struct PyModel {
    config: model::ModelConfig,
    state: ModelState,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            config: config.inner.clone(),
            state: ModelState::init(&config.inner, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(config: &PyModelConfig, path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            config: config.inner.clone(),
            state: model::load_checkpoint(&path, &config.inner).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.state, &path).py()
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.config.clone(),
        }
    }

    fn num_params(&self) -> usize {
        self.state.num_params()
    }

    /// Evaluation-mode pass: class lengths, prediction, latent and
    /// reconstruction.
    fn forward<'py>(&self, py: Python<'py>, cloud: &PyPointCloud) -> PyResult<Bound<'py, PyDict>> {
        let out = model::forward(&cloud.inner, &self.config, &self.state).py()?;
        let d = PyDict::new(py);
        d.set_item("class_lengths", out.class_lengths)?;
        d.set_item("predicted", out.predicted)?;
        d.set_item("latent", out.latent)?;
        d.set_item("reconstruction", model::tensor_points(&out.reconstruction))?;
        Ok(d)
    }

    /// Part-capsule index of every point.
    fn part_assign(&self, cloud: &PyPointCloud) -> PyResult<Vec<usize>> {
        train::part_assign(&self.config, &self.state, &cloud.inner).py()
    }

    /// Reconstructions with latent entry `dim` set to each of `values`.
    fn perturb_latent(&self, cloud: &PyPointCloud, dim: usize, values: Vec<f64>) -> PyResult<Vec<PyPointCloud>> {
        Ok(wrap(
            train::latent_perturb(&self.config, &self.state, &cloud.inner, dim, &values).py()?,
        ))
    }

    /// Returns `(accuracy, mean Chamfer distance)`.
    fn evaluate(&self, py: Python<'_>, clouds: Vec<PyPointCloud>) -> PyResult<(f64, f64)> {
        let clouds = unwrap(clouds);
        let m = py
            .detach(|| train::evaluate(&self.config, &self.state, &clouds))
            .py()?;
        Ok((m.accuracy, m.cd_mean))
    }

    /// Trains in place, keeping the state with the lowest validation
    /// Chamfer distance. Returns one dict per epoch.
    #[pyo3(signature = (train_set, val_set = Vec::new(), epochs = 30, batch_size = 16, lr = 1e-2, milestones = vec![0.7, 0.9], seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        train_set: Vec<PyPointCloud>,
        val_set: Vec<PyPointCloud>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        milestones: Vec<f64>,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let (train_set, val_set) = (unwrap(train_set), unwrap(val_set));
        let tcfg = TrainConfig {
            epochs,
            batch_size,
            lr,
            milestones,
            seed,
            ..Default::default()
        };
        let initial = self.state.clone();
        let config = &self.config;
        let outcome = py
            .detach(|| train::train_with(config, &tcfg, &train_set, &val_set, Some(initial), |_| {}))
            .py()?;
        self.state = outcome.best;
        outcome
            .log
            .iter()
            .map(|l| {
                let d = PyDict::new(py);
                d.set_item("epoch", l.epoch)?;
                d.set_item("loss", l.loss)?;
                d.set_item("margin", l.margin)?;
                d.set_item("cd", l.cd)?;
                d.set_item("accuracy", l.accuracy)?;
                d.set_item("lr", l.lr)?;
                if let Some(v) = &l.val {
                    d.set_item("val_accuracy", v.accuracy)?;
                    d.set_item("val_cd", v.cd_mean)?;
                }
                Ok(d)
            })
            .collect()
    }
}

#[pymodule]
fn pointcaps_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_shape, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(add_outliers, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(squash, m)?)?;
    m.add_function(wrap_pyfunction!(margin_loss, m)?)?;
    m.add_function(wrap_pyfunction!(route, m)?)?;
    Ok(())
}
