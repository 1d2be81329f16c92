//! Python bindings: datasets, models, PGD, training, robustness curves,
//! AUROC and contrastive explanations.
//!
//! Images cross the boundary as nested lists of rows; configurations as
//! dicts (or JSON strings) with the same fields as the Rust structs.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use robex::{AttackConfig, ModelConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py(e: robex::Error) -> PyErr {
    use robex::Error as E;
    match e {
        E::Config(_) | E::Input(_) | E::Undefined(_) => PyValueError::new_err(e.to_string()),
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image_from(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err(
            "image must be a non-empty rectangular list of rows",
        ));
    }
    Ok(
        Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect())
            .expect("shape checked"),
    )
}

fn image_to(image: &Array2<f64>) -> Vec<Vec<f64>> {
    image.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Parses a dict (via `json.dumps`) or JSON string into a config struct.
fn config_from<T: DeserializeOwned>(
    py: Python<'_>,
    obj: Option<&Bound<'_, PyAny>>,
) -> PyResult<Option<T>> {
    let Some(obj) = obj else { return Ok(None) };
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => py
            .import("json")?
            .call_method1("dumps", (obj,))?
            .extract()?,
    };
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Serializes a value into Python objects via `json.loads`.
fn json_to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Frames with labels and video ids.
#[pyclass(name = "Dataset", module = "pyrobex", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: robex::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Deterministic synthetic ultrasound-like frames.
    #[staticmethod]
    #[pyo3(signature = (videos_per_class=20, frames_per_video=8, height=32, width=32, seed=0))]
    fn synth(
        videos_per_class: usize,
        frames_per_video: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = robex::SynthConfig {
            videos_per_class,
            frames_per_video,
            height,
            width,
            seed,
            ..robex::SynthConfig::default()
        };
        robex::synth_generate(&config)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    /// Loads `<root>/<label>/<video>/<frame>.png`, resized to `height x width`.
    #[staticmethod]
    #[pyo3(signature = (root, height=32, width=32))]
    fn load(root: PathBuf, height: usize, width: usize) -> PyResult<Self> {
        robex::data::load_dataset(&root, height, width)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn save(&self, root: PathBuf) -> PyResult<usize> {
        robex::data::write_dataset(&self.inner, &root)
            .map(|files| files.len())
            .map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn images(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner
            .samples
            .iter()
            .map(|s| image_to(&s.image))
            .collect()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    fn video_ids(&self) -> Vec<String> {
        self.inner
            .samples
            .iter()
            .map(|s| s.video_id.clone())
            .collect()
    }

    /// Grouped, stratified `(train, test)` pairs: no video spans both sides.
    fn kfold(&self, k: usize, seed: u64) -> PyResult<Vec<(PyDataset, PyDataset)>> {
        let folds = robex::group_kfold(&self.inner, k, seed).map_err(to_py)?;
        Ok(folds
            .iter()
            .map(|f| {
                (
                    PyDataset {
                        inner: self.inner.subset(&f.train),
                    },
                    PyDataset {
                        inner: self.inner.subset(&f.test),
                    },
                )
            })
            .collect())
    }
}

/// Trained or freshly initialized network parameters.
#[pyclass(name = "Model", module = "pyrobex", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: robex::ModelParams,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (height=32, width=32, seed=0, conv1_channels=4, conv2_channels=8, hidden_units=32))]
    fn small_cnn(
        height: usize,
        width: usize,
        seed: u64,
        conv1_channels: usize,
        conv2_channels: usize,
        hidden_units: usize,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            conv1_channels,
            conv2_channels,
            hidden_units,
            ..ModelConfig::small_cnn(height, width, robex::Label::ALL.len(), seed)
        };
        robex::init_model(&config)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (height, width, hidden_units, seed=0))]
    fn mlp(height: usize, width: usize, hidden_units: usize, seed: u64) -> PyResult<Self> {
        let config = ModelConfig::mlp(height, width, hidden_units, robex::Label::ALL.len(), seed);
        robex::init_model(&config)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        robex::checkpoint::load_params(&path)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        robex::checkpoint::save_params(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    fn logits(&self, images: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let images = images
            .into_iter()
            .map(image_from)
            .collect::<PyResult<Vec<_>>>()?;
        let preds = robex::forward(&self.inner, &images).map_err(to_py)?;
        Ok(preds.into_iter().map(|p| p.logits).collect())
    }

    fn predict(&self, images: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<usize>> {
        let images = images
            .into_iter()
            .map(image_from)
            .collect::<PyResult<Vec<_>>>()?;
        let preds = robex::forward(&self.inner, &images).map_err(to_py)?;
        Ok(preds.into_iter().map(|p| p.predicted_class).collect())
    }

    /// Mean cross-entropy over the batch.
    fn loss(&self, images: Vec<Vec<Vec<f64>>>, labels: Vec<usize>) -> PyResult<f64> {
        let images = images
            .into_iter()
            .map(image_from)
            .collect::<PyResult<Vec<_>>>()?;
        robex::loss(&self.inner, &images, &labels).map_err(to_py)
    }

    fn grad_input(&self, image: Vec<Vec<f64>>, label: usize) -> PyResult<Vec<Vec<f64>>> {
        let g = robex::model::grad_input(&self.inner, &image_from(image)?, label).map_err(to_py)?;
        Ok(image_to(&g))
    }

    fn accuracy(&self, dataset: &PyDataset) -> PyResult<f64> {
        robex::clean_accuracy(&self.inner, &dataset.inner).map_err(to_py)
    }
}

fn attack_from(
    py: Python<'_>,
    attack: Option<&Bound<'_, PyAny>>,
    epsilon: f64,
) -> PyResult<AttackConfig> {
    Ok(config_from::<AttackConfig>(py, attack)?
        .unwrap_or_else(|| AttackConfig::l2(epsilon, robex::attacks::EVAL_STEPS))
        .with_epsilon(epsilon))
}

/// Untargeted PGD within radius `epsilon`; returns `(delta, achieved_loss)`.
#[pyfunction]
#[pyo3(signature = (model, image, label, epsilon, attack=None))]
fn pgd(
    py: Python<'_>,
    model: &PyModel,
    image: Vec<Vec<f64>>,
    label: usize,
    epsilon: f64,
    attack: Option<&Bound<'_, PyAny>>,
) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let config = attack_from(py, attack, epsilon)?;
    let p = robex::pgd(&model.inner, &image_from(image)?, label, &config).map_err(to_py)?;
    Ok((image_to(&p.delta), p.achieved_loss))
}

/// Trains on `train_set`, validating on `val_set` each epoch. Returns the
/// model of the selected epoch and the per-epoch records.
#[pyfunction]
#[pyo3(signature = (train_set, val_set, model_config=None, train_config=None))]
fn train<'py>(
    py: Python<'py>,
    train_set: &PyDataset,
    val_set: &PyDataset,
    model_config: Option<&Bound<'py, PyAny>>,
    train_config: Option<&Bound<'py, PyAny>>,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let first = train_set
        .inner
        .samples
        .first()
        .ok_or_else(|| PyValueError::new_err("empty training set"))?;
    let (h, w) = first.image.dim();
    let model_config = config_from::<ModelConfig>(py, model_config)?
        .unwrap_or_else(|| ModelConfig::small_cnn(h, w, robex::Label::ALL.len(), 0));
    let train_config = config_from::<TrainConfig>(py, train_config)?.unwrap_or_default();
    let history = py
        .detach(|| {
            robex::training::train(
                &model_config,
                &train_config,
                &train_set.inner,
                &val_set.inner,
                None,
            )
        })
        .map_err(to_py)?;
    let best = robex::select_best(&history.records, train_config.mode).map_err(to_py)?;
    let records = json_to_py(py, &history.records)?;
    Ok((
        PyModel {
            inner: history.snapshots[best].clone(),
        },
        records,
    ))
}

/// Per-fold accuracy over an ascending radius grid starting at 0.
#[pyfunction]
#[pyo3(signature = (model_id, models, test_sets, epsilons, attack=None))]
fn robustness_curve<'py>(
    py: Python<'py>,
    model_id: &str,
    models: Vec<PyModel>,
    test_sets: Vec<PyDataset>,
    epsilons: Vec<f64>,
    attack: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let template = attack_from(py, attack, epsilons.last().copied().unwrap_or(0.0))?;
    let models: Vec<_> = models.into_iter().map(|m| m.inner).collect();
    let tests: Vec<_> = test_sets.into_iter().map(|d| d.inner).collect();
    let curve = py
        .detach(|| robex::robustness_curve(model_id, &models, &tests, &epsilons, &template))
        .map_err(to_py)?;
    json_to_py(py, &curve)
}

/// One-vs-rest AUROC per class; `None` where a class has no positives or
/// no negatives.
#[pyfunction]
fn auroc_ovr(
    scores: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
) -> PyResult<Vec<Option<f64>>> {
    robex::auroc_ovr(&scores, &labels, num_classes).map_err(to_py)
}

/// Contrastive explanation of one image: the loss-raising and loss-lowering
/// perturbations and their roles.
#[pyfunction]
#[pyo3(signature = (model, image, label, epsilon, attack=None))]
fn explain<'py>(
    py: Python<'py>,
    model: &PyModel,
    image: Vec<Vec<f64>>,
    label: usize,
    epsilon: f64,
    attack: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let label = robex::Label::from_index(label)
        .ok_or_else(|| PyValueError::new_err(format!("label {label} out of range")))?;
    let sample = robex::Sample {
        image: image_from(image)?,
        label,
        video_id: "python".into(),
        frame_index: 0,
    };
    let template = attack_from(py, attack, epsilon)?;
    let ex = robex::explain(&model.inner, &sample, epsilon, &template).map_err(to_py)?;
    json_to_py(py, &ex)
}

#[pyfunction]
fn derive_seed(parent: u64, tag: &str) -> u64 {
    robex::seed::derive_seed(parent, tag)
}

#[pymodule]
fn pyrobex(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(pgd, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(robustness_curve, m)?)?;
    m.add_function(wrap_pyfunction!(auroc_ovr, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add("LABELS", robex::Label::ALL.map(|l| l.name()).to_vec())?;
    Ok(())
}
