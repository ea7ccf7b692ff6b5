//! Python bindings: NCC matching, APE evaluation, geometry constants and
//! model introspection.

use bevlocate::evaluation;
use bevlocate::geometry::GeoTransform;
use bevlocate::gradcheck;
use bevlocate::imaging::GrayImage;
use bevlocate::model::{Model, ModelConfig};
use bevlocate::registration::{self, ScoreMap};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Row-major nested lists to a grayscale image; rows must be non-empty and
/// equally long.
pub fn gray_from_rows(rows: &[Vec<f64>]) -> bevlocate::Result<GrayImage> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(bevlocate::Error::Shape("ragged rows".into()));
    }
    GrayImage::new(rows.len(), cols, rows.concat())
}

pub fn rows_from_scores(m: &ScoreMap) -> Vec<Vec<f64>> {
    m.data.chunks(m.cols).map(<[f64]>::to_vec).collect()
}

pub fn scores(template: &[Vec<f64>], region: &[Vec<f64>], fast: bool) -> bevlocate::Result<ScoreMap> {
    let t = gray_from_rows(template)?;
    let r = gray_from_rows(region)?;
    if fast {
        registration::ncc_map_fast(&t, None, &r)
    } else {
        registration::ncc_map(&t, None, &r)
    }
}

/// NCC score for every placement of `template` inside `region`.
#[pyfunction]
#[pyo3(signature = (template, region, fast = true))]
fn ncc_map(template: Vec<Vec<f64>>, region: Vec<Vec<f64>>, fast: bool) -> PyResult<Vec<Vec<f64>>> {
    scores(&template, &region, fast)
        .map(|m| rows_from_scores(&m))
        .map_err(value_err)
}

/// `(row, col, score)` of the best placement.
#[pyfunction]
#[pyo3(signature = (template, region, fast = true))]
fn ncc_argmax(template: Vec<Vec<f64>>, region: Vec<Vec<f64>>, fast: bool) -> PyResult<(usize, usize, f64)> {
    scores(&template, &region, fast).map(|m| m.argmax()).map_err(value_err)
}

#[pyclass(name = "EvalReport", get_all, frozen)]
struct PyEvalReport {
    ape_mean: f64,
    ape_std: f64,
    ape_std_sample: f64,
    ape_median: f64,
    ape_max: f64,
    match_rate: f64,
    n_frames: usize,
    threshold: f64,
}

#[pymethods]
impl PyEvalReport {
    fn __repr__(&self) -> String {
        format!(
            "EvalReport(ape_mean={}, ape_std={}, match_rate={}, n_frames={}, threshold={})",
            self.ape_mean, self.ape_std, self.match_rate, self.n_frames, self.threshold
        )
    }
}

/// Per-frame Euclidean error between paired `(easting, northing)` points.
#[pyfunction]
fn ape_series(preds: Vec<(f64, f64)>, gts: Vec<(f64, f64)>) -> PyResult<Vec<f64>> {
    evaluation::ape_series(&preds, &gts).map_err(value_err)
}

/// Mean, population std and strict-threshold match rate of errors `d`.
#[pyfunction]
#[pyo3(signature = (d, threshold = evaluation::MATCH_THRESHOLD_M))]
fn summarize(d: Vec<f64>, threshold: f64) -> PyResult<PyEvalReport> {
    let r = evaluation::summarize(&d, threshold).map_err(value_err)?;
    Ok(PyEvalReport {
        ape_mean: r.ape_mean,
        ape_std: r.ape_std,
        ape_std_sample: r.ape_std_sample,
        ape_median: r.ape_median,
        ape_max: r.ape_max,
        match_rate: r.match_rate,
        n_frames: r.n_frames,
        threshold: r.threshold,
    })
}

/// Pixels needed to cover `meters`, rounded up.
#[pyfunction]
#[pyo3(signature = (meters, m_per_px = 0.229))]
fn meters_to_px(meters: f64, m_per_px: f64) -> PyResult<usize> {
    Ok(GeoTransform::new(0.0, 0.0, m_per_px)
        .map_err(value_err)?
        .meters_to_px_ceil(meters))
}

/// `(encoder, renderer, total)` trainable parameter counts.
#[pyfunction]
#[pyo3(signature = (miniature = false))]
fn param_count(miniature: bool) -> PyResult<(usize, usize, usize)> {
    let cfg = if miniature {
        ModelConfig::miniature()
    } else {
        ModelConfig::default()
    };
    let c = Model::<f32>::new(cfg, 0).map_err(value_err)?.param_count();
    Ok((c.encoder, c.renderer, c.total))
}

/// Runs the finite-difference suite; returns `(name, max_rel_err, passed)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck_suite(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let results = py.detach(|| gradcheck::run_suite(seed)).map_err(value_err)?;
    Ok(results.into_iter().map(|r| (r.name, r.max_rel_err, r.passed)).collect())
}

#[pymodule]
fn bevlocate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEvalReport>()?;
    m.add_function(wrap_pyfunction!(ncc_map, m)?)?;
    m.add_function(wrap_pyfunction!(ncc_argmax, m)?)?;
    m.add_function(wrap_pyfunction!(ape_series, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(meters_to_px, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_suite, m)?)?;
    Ok(())
}
