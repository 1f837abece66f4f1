//! Python bindings for entropy scoring, mask planning, data files and metrics.

use std::path::PathBuf;

use momae_core::dataio;
use momae_core::masker;
use momae_core::mfcore::{self, ProbabilityDistribution};
use momae_core::pipeline::{self, metrics, Dataset};
use momae_core::{Error, ImageBuffer, MaskPolicy, PatchScores};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::TrainingDivergence { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn policy(name: &str) -> PyResult<MaskPolicy> {
    name.parse().map_err(py_err)
}

/// An 8-bit image stored row-major with interleaved channels.
#[pyclass(name = "Image", frozen, from_py_object)]
#[derive(Clone)]
struct PyImage(ImageBuffer);

#[pymethods]
impl PyImage {
    #[new]
    #[pyo3(signature = (height, width, data, channels = 1, levels = mfcore::DEFAULT_LEVELS))]
    fn new(
        height: usize,
        width: usize,
        data: Vec<u8>,
        channels: usize,
        levels: u32,
    ) -> PyResult<Self> {
        ImageBuffer::new(height, width, channels, levels, data)
            .map(Self)
            .map_err(py_err)
    }

    /// Reads a binary PGM or PPM file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dataio::load_pgm_ppm(path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataio::save_pgm_ppm(&self.0, path).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    #[getter]
    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.data())
    }

    fn __repr__(&self) -> String {
        format!(
            "Image(height={}, width={}, channels={})",
            self.0.height(),
            self.0.width(),
            self.0.channels()
        )
    }
}

/// Partition of patch indices into visible and masked sets.
#[pyclass(name = "MaskPlan", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMaskPlan(masker::MaskPlan);

#[pymethods]
impl PyMaskPlan {
    /// Parses the three-line text form.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        text.parse().map(Self).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.0.to_string()
    }

    #[getter]
    fn visible(&self) -> Vec<usize> {
        self.0.visible.clone()
    }

    #[getter]
    fn masked(&self) -> Vec<usize> {
        self.0.masked.clone()
    }

    #[getter]
    fn ratio(&self) -> f64 {
        self.0.ratio
    }

    #[getter]
    fn policy(&self) -> String {
        self.0.policy.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn q(&self) -> f64 {
        self.0.q
    }

    #[getter]
    fn s(&self) -> u32 {
        self.0.s
    }

    fn digest(&self) -> String {
        self.0.digest()
    }

    /// Swaps visible and masked sets.
    fn invert(&self) -> PyResult<Self> {
        masker::invert_plan(&self.0).map(Self).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.num_patches()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!(
            "MaskPlan(policy={}, visible={}, masked={})",
            self.0.policy,
            self.0.visible.len(),
            self.0.masked.len()
        )
    }
}

#[pyclass(name = "Metrics", frozen, get_all)]
struct PyMetrics {
    accuracy: f64,
    f1: f64,
    pr_auc: f64,
    roc_auc: f64,
    confusion: Vec<Vec<u64>>,
    json: String,
}

impl From<metrics::Metrics> for PyMetrics {
    fn from(m: metrics::Metrics) -> Self {
        Self {
            json: m.to_json(),
            accuracy: m.accuracy,
            f1: m.f1,
            pr_auc: m.pr_auc,
            roc_auc: m.roc_auc,
            confusion: m.confusion,
        }
    }
}

fn distribution(probs: Vec<f64>) -> PyResult<ProbabilityDistribution> {
    ProbabilityDistribution::from_probs(probs).map_err(py_err)
}

/// Renyi entropy in nats of a probability vector.
#[pyfunction]
fn renyi_entropy(probs: Vec<f64>, q: f64) -> PyResult<f64> {
    Ok(mfcore::renyi_entropy(&distribution(probs)?, q, 1).entropy)
}

#[pyfunction]
fn shannon_entropy(probs: Vec<f64>) -> PyResult<f64> {
    Ok(mfcore::shannon_entropy(&distribution(probs)?))
}

#[pyfunction]
fn partition_function(probs: Vec<f64>, q: f64) -> PyResult<f64> {
    Ok(mfcore::partition_function(&distribution(probs)?, q))
}

/// Entropy of the intensity histogram of `pixels` at bin spacing `s`.
#[pyfunction]
#[pyo3(signature = (pixels, q = masker::DEFAULT_Q, s = masker::DEFAULT_SPACING, levels = mfcore::DEFAULT_LEVELS))]
fn pixel_entropy(pixels: Vec<u8>, q: f64, s: u32, levels: u32) -> PyResult<f64> {
    mfcore::pixel_entropy(&pixels, q, s, levels)
        .map(|r| r.entropy)
        .map_err(py_err)
}

/// Slope of ln Z against ln s; returns `(tau, r_squared)`.
#[pyfunction]
#[pyo3(signature = (pixels, scales, q = masker::DEFAULT_Q, levels = mfcore::DEFAULT_LEVELS))]
fn estimate_tau(pixels: Vec<u8>, scales: Vec<u32>, q: f64, levels: u32) -> PyResult<(f64, f64)> {
    mfcore::estimate_tau(&pixels, &scales, q, levels)
        .map(|t| (t.tau, t.r_squared))
        .map_err(py_err)
}

/// Per-patch entropy in row-major patch order.
#[pyfunction]
#[pyo3(signature = (image, patch_size, q = masker::DEFAULT_Q, s = masker::DEFAULT_SPACING))]
fn score_image(image: &PyImage, patch_size: usize, q: f64, s: u32) -> PyResult<Vec<f64>> {
    masker::score_image(&image.0, patch_size, q, s)
        .map(|p| p.scores)
        .map_err(py_err)
}

/// Keeps the highest-scoring patches visible.
#[pyfunction]
#[pyo3(signature = (scores, ratio = masker::DEFAULT_MASK_RATIO, q = masker::DEFAULT_Q, s = masker::DEFAULT_SPACING))]
fn select_visible(scores: Vec<f64>, ratio: f64, q: f64, s: u32) -> PyResult<PyMaskPlan> {
    masker::select_visible(&PatchScores { scores, q, s }, ratio)
        .map(PyMaskPlan)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (num_patches, ratio = masker::DEFAULT_MASK_RATIO, seed = 0))]
fn random_mask(num_patches: usize, ratio: f64, seed: u64) -> PyResult<PyMaskPlan> {
    masker::random_mask(num_patches, ratio, seed)
        .map(PyMaskPlan)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (
    image,
    patch_size,
    policy = "multifractal",
    ratio = masker::DEFAULT_MASK_RATIO,
    q = masker::DEFAULT_Q,
    s = masker::DEFAULT_SPACING,
    seed = 0,
))]
fn plan_for_image(
    image: &PyImage,
    patch_size: usize,
    policy: &str,
    ratio: f64,
    q: f64,
    s: u32,
    seed: u64,
) -> PyResult<PyMaskPlan> {
    masker::plan_for_image(
        &image.0,
        patch_size,
        self::policy(policy)?,
        ratio,
        q,
        s,
        seed,
    )
    .map(PyMaskPlan)
    .map_err(py_err)
}

/// Reads a dataset container; returns `(images, labels, num_classes)`.
#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<(Vec<PyImage>, Vec<u16>, usize)> {
    let c = dataio::load_container(path).map_err(py_err)?;
    let images = c
        .images()
        .map_err(py_err)?
        .into_iter()
        .map(PyImage)
        .collect();
    Ok((images, c.labels, c.num_classes))
}

#[pyfunction]
fn save_dataset(
    path: PathBuf,
    images: Vec<PyImage>,
    labels: Vec<u16>,
    num_classes: usize,
) -> PyResult<()> {
    let images: Vec<ImageBuffer> = images.into_iter().map(|i| i.0).collect();
    let c = dataio::DatasetContainer::from_images(&images, &labels, num_classes).map_err(py_err)?;
    dataio::save_container(&c, path).map_err(py_err)
}

/// Classification metrics from per-sample class probabilities.
#[pyfunction]
fn compute_metrics(
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
) -> PyResult<PyMetrics> {
    metrics::compute_metrics(&probs, &labels, num_classes)
        .map(PyMetrics::from)
        .map_err(py_err)
}

/// ROC-AUC of `scores` against boolean labels; `None` when one class is absent.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, positive: Vec<bool>) -> Option<f64> {
    metrics::roc_auc(&scores, &positive)
}

/// Evaluates a fine-tuned checkpoint on a dataset container.
#[pyfunction]
fn evaluate_checkpoint(py: Python<'_>, ckpt: PathBuf, data: PathBuf) -> PyResult<PyMetrics> {
    py.detach(|| {
        let model = dataio::load_checkpoint(ckpt)?.model()?;
        let dataset = Dataset::from_container(&dataio::load_container(data)?)?;
        pipeline::evaluate(&model, &dataset)
    })
    .map(PyMetrics::from)
    .map_err(py_err)
}

/// Finite-difference gradient checks; returns `(name, max_rel_error, checked)` rows.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, f64, usize)>> {
    let results = py
        .detach(|| momae_core::selfcheck::run_suite(seed))
        .map_err(py_err)?;
    Ok(results
        .into_iter()
        .map(|r| (r.name, r.report.max_rel_error, r.report.checked))
        .collect())
}

#[pymodule]
fn momae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyMaskPlan>()?;
    m.add_class::<PyMetrics>()?;
    m.add_function(wrap_pyfunction!(renyi_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(shannon_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(partition_function, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_tau, m)?)?;
    m.add_function(wrap_pyfunction!(score_image, m)?)?;
    m.add_function(wrap_pyfunction!(select_visible, m)?)?;
    m.add_function(wrap_pyfunction!(random_mask, m)?)?;
    m.add_function(wrap_pyfunction!(plan_for_image, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
