//! Python bindings: schedules, forward noising, metrics, config parsing and
//! sampling from a checkpoint.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use diffkit::cli::{checkpoint_layer, sample_command, Checkpoint, RunConfig, SampleArgs};
use diffkit::metrics::{self, GaussianStats, SquareMatrix};
use diffkit::nn::Module;
use diffkit::schedule::{BetaSchedule, ScheduleConfig, ScheduleTable};
use diffkit::unet::UNet;
use diffkit::{Rng, Tensor};

create_exception!(diffkit_py, DiffkitError, PyException);

fn py_err(e: diffkit::Error) -> PyErr {
    DiffkitError::new_err(format!("{e} (exit code {})", e.exit_code()))
}

fn table(kind: &str, num_train_timesteps: usize, beta_start: f64, beta_end: f64) -> PyResult<ScheduleTable> {
    let beta_schedule: BetaSchedule = kind.parse().map_err(py_err)?;
    let cfg = ScheduleConfig { beta_schedule, num_train_timesteps, beta_start, beta_end, ..Default::default() };
    ScheduleTable::build(&cfg).map_err(py_err)
}

fn rows_to_flat(rows: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize, usize)> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok((rows.concat(), rows.len(), d))
}

fn stats(rows: &[Vec<f64>]) -> PyResult<GaussianStats> {
    let (flat, n, d) = rows_to_flat(rows)?;
    metrics::fit_gaussian(&flat, n, d).map_err(py_err)
}

/// Returns (betas, alphas, alphas_cumprod) for a linear or cosine schedule.
#[pyfunction]
#[pyo3(signature = (kind = "linear", num_train_timesteps = 1000, beta_start = 0.0002, beta_end = 0.02))]
fn schedule(kind: &str, num_train_timesteps: usize, beta_start: f64, beta_end: f64) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let t = table(kind, num_train_timesteps, beta_start, beta_end)?;
    Ok((t.betas, t.alphas, t.alphas_cumprod))
}

/// sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·noise for flat row-major data of `shape`.
#[pyfunction]
#[pyo3(signature = (x0, noise, shape, timesteps, kind = "linear", num_train_timesteps = 1000, beta_start = 0.0002, beta_end = 0.02))]
#[allow(clippy::too_many_arguments)]
fn add_noise(
    x0: Vec<f64>,
    noise: Vec<f64>,
    shape: Vec<usize>,
    timesteps: Vec<usize>,
    kind: &str,
    num_train_timesteps: usize,
    beta_start: f64,
    beta_end: f64,
) -> PyResult<Vec<f64>> {
    let t = table(kind, num_train_timesteps, beta_start, beta_end)?;
    let x0 = Tensor::from_vec(x0, &shape).map_err(py_err)?;
    let noise = Tensor::from_vec(noise, &shape).map_err(py_err)?;
    Ok(t.add_noise(&x0, &noise, &timesteps).map_err(py_err)?.data().to_vec())
}

/// Descending inference timesteps.
#[pyfunction]
fn select_timesteps(num_train_timesteps: usize, steps: usize) -> PyResult<Vec<usize>> {
    diffkit::sampler::select_timesteps(num_train_timesteps, steps).map_err(py_err)
}

/// Mean vector and covariance rows of feature rows.
#[pyfunction]
fn fit_gaussian(features: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let s = stats(&features)?;
    let cov = s.cov.data.chunks(s.cov.n.max(1)).map(<[f64]>::to_vec).collect();
    Ok((s.mean, cov))
}

/// Fréchet distance between Gaussians fitted to two sets of feature rows.
#[pyfunction]
fn fid(real: Vec<Vec<f64>>, generated: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::fid(&stats(&real)?, &stats(&generated)?).map_err(py_err)
}

/// (mean, std) of the Inception Score over `splits` folds of class-probability rows.
#[pyfunction]
#[pyo3(signature = (probs, splits = 1))]
fn inception_score(probs: Vec<Vec<f64>>, splits: usize) -> PyResult<(f64, f64)> {
    let (flat, n, c) = rows_to_flat(&probs)?;
    metrics::inception_score(&flat, n, c, splits).map_err(py_err)
}

/// Principal square root of a symmetric positive semi-definite matrix.
#[pyfunction]
fn matrix_sqrt(m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (flat, n, d) = rows_to_flat(&m)?;
    if n != d {
        return Err(PyValueError::new_err(format!("matrix is {n}x{d}, not square")));
    }
    let root = metrics::matrix_sqrt_psd(&SquareMatrix::new(n, flat).map_err(py_err)?).map_err(py_err)?;
    Ok(root.data.chunks(n.max(1)).map(<[f64]>::to_vec).collect())
}

/// Resolves `key = value` text over the defaults and returns every key as text.
#[pyfunction]
#[pyo3(signature = (text = ""))]
fn parse_config(text: &str) -> PyResult<BTreeMap<String, String>> {
    let cfg = RunConfig::parse(text, &[]).map_err(py_err)?;
    Ok(RunConfig::KEYS.iter().filter_map(|k| cfg.get(k).map(|v| (k.to_string(), v))).collect())
}

/// FNV-1a hash of the canonical config text.
#[pyfunction]
#[pyo3(signature = (text = ""))]
fn config_hash(text: &str) -> PyResult<u64> {
    Ok(RunConfig::parse(text, &[]).map_err(py_err)?.hash())
}

/// Trainable parameters of the UNet described by the config text.
#[pyfunction]
#[pyo3(signature = (text = ""))]
fn unet_param_count(text: &str) -> PyResult<usize> {
    let cfg = RunConfig::parse(text, &[]).map_err(py_err)?;
    let net = UNet::<f32>::new(cfg.unet_config(), &mut Rng::new(0)).map_err(py_err)?;
    Ok(net.param_count())
}

/// Samples from a checkpoint into `out` (PNGs, grid and manifest) and
/// returns (shape, pixels in [0, 1]). `overrides` take precedence over the
/// checkpoint's stored config.
#[pyfunction]
#[pyo3(signature = (checkpoint, out, overrides = BTreeMap::new()))]
fn sample(py: Python<'_>, checkpoint: PathBuf, out: PathBuf, overrides: BTreeMap<String, String>) -> PyResult<(Vec<usize>, Vec<f32>)> {
    py.detach(|| {
        let ck = Checkpoint::load(&checkpoint)?;
        let env = std::env::var(diffkit::cli::SEED_ENV).ok();
        let config = RunConfig::resolve(env.as_deref(), &[checkpoint_layer(&ck)?, overrides.into_iter().collect()])?;
        let images = sample_command(&SampleArgs { config, checkpoint, out }, &mut std::io::sink())?;
        Ok((images.shape().to_vec(), images.data().to_vec()))
    })
    .map_err(py_err)
}

#[pymodule]
pub fn diffkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DiffkitError", m.py().get_type::<DiffkitError>())?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(select_timesteps, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(inception_score, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_sqrt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(unet_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    Ok(())
}
