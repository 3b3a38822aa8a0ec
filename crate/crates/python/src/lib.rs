use std::path::PathBuf;

use cyclegan_ad::calibrate;
use cyclegan_ad::dataset::{synthesize_toy_dataset, Image, SyntheticSpec};
use cyclegan_ad::model::{receptive_field, DiscriminatorSpec};
use cyclegan_ad::scoring::{self, FeatureStats};
use cyclegan_ad::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::File { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn pairs(scores: Vec<f64>, abnormal: Vec<bool>) -> PyResult<Vec<(f64, bool)>> {
    if scores.len() != abnormal.len() {
        return Err(PyValueError::new_err(format!("{} scores but {} labels", scores.len(), abnormal.len())));
    }
    Ok(scores.into_iter().zip(abnormal).collect())
}

/// Smallest threshold that flags every abnormal score.
#[pyfunction]
fn zfn_threshold(scores: Vec<f64>, abnormal: Vec<bool>) -> PyResult<f64> {
    calibrate::zfn_threshold(&pairs(scores, abnormal)?).map_err(py_err)
}

/// `(threshold, accuracy)` maximizing accuracy.
#[pyfunction]
fn acc_threshold(scores: Vec<f64>, abnormal: Vec<bool>) -> PyResult<(f64, f64)> {
    calibrate::acc_threshold(&pairs(scores, abnormal)?).map_err(py_err)
}

#[pyfunction]
fn auc_roc(scores: Vec<f64>, abnormal: Vec<bool>) -> PyResult<f64> {
    calibrate::auc_roc(&pairs(scores, abnormal)?).map_err(py_err)
}

/// All five detector metrics as a dict.
#[pyfunction]
fn evaluate_scores<'py>(py: Python<'py>, scores: Vec<f64>, abnormal: Vec<bool>) -> PyResult<Bound<'py, PyDict>> {
    let m = calibrate::evaluate_scores(&pairs(scores, abnormal)?).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("zfn_threshold", m.zfn_threshold)?;
    d.set_item("zfn_acc", m.zfn_acc)?;
    d.set_item("acc_threshold", m.acc_threshold)?;
    d.set_item("max_acc", m.max_acc)?;
    d.set_item("auc", m.auc)?;
    Ok(d)
}

/// Fréchet distance between two Gaussians; covariances are row-major.
#[pyfunction]
fn frechet_distance(mu_a: Vec<f64>, sigma_a: Vec<f64>, mu_b: Vec<f64>, sigma_b: Vec<f64>) -> PyResult<f64> {
    let a = FeatureStats::new(mu_a, sigma_a, 0).map_err(py_err)?;
    let b = FeatureStats::new(mu_b, sigma_b, 0).map_err(py_err)?;
    scoring::frechet_distance(&a, &b).map_err(py_err)
}

/// Sum of squared differences of two channel-major images in [0, 1].
#[pyfunction]
fn sse_score(original: Vec<f32>, generated: Vec<f32>, channels: usize, height: usize, width: usize) -> PyResult<f64> {
    let a = Image::new(channels, height, width, original).map_err(py_err)?;
    let b = Image::new(channels, height, width, generated).map_err(py_err)?;
    scoring::sse_score(&a, &b).map_err(py_err)
}

/// Receptive field of the default PatchGAN discriminator.
#[pyfunction]
fn default_receptive_field() -> usize {
    receptive_field(&DiscriminatorSpec::patchgan_70(3).layers())
}

/// Seeded blob dataset as `(label, flat channel-major pixels)` pairs.
#[pyfunction]
fn synthesize_blobs(resolution: usize, n_normal: usize, n_abnormal: usize, seed: u64) -> PyResult<Vec<(String, Vec<f32>)>> {
    let set = synthesize_toy_dataset(&SyntheticSpec::blobs(resolution, n_normal, n_abnormal, seed)).map_err(py_err)?;
    Ok(set.images().iter().map(|i| (i.label.as_str().to_string(), i.image.data().to_vec())).collect())
}

/// Writes the original / reconstruction / difference panels for one image.
#[pyfunction]
fn reconstruct(checkpoint: PathBuf, image: PathBuf, out_dir: PathBuf) -> PyResult<Vec<PathBuf>> {
    cyclegan_ad::experiment::demo_reconstruct(&checkpoint, &image, &out_dir, None).map_err(py_err)
}

#[pymodule]
fn cyclegan_ad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(zfn_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(acc_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(auc_roc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_scores, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(sse_score, m)?)?;
    m.add_function(wrap_pyfunction!(default_receptive_field, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    Ok(())
}
