//! Python module `framer`. Arrays cross the boundary as flat lists of
//! floats in row-major order, paired with an explicit shape.

use std::path::{Path, PathBuf};

use framer_cli::commands::{self, Model};
use framer_cli::config::ExperimentConfig;
use framer_core::data;
use framer_core::degrade::{make_pair, DegradationConfig};
use framer_core::diffusion::SamplerKind;
use framer_core::image::Image;
use framer_core::metrics;
use framer_core::spectral::{self, Band, BandMasks};
use framer_core::tensor::{Graph, Tensor, Var};
use framer_core::train::{Trainer, CURVE_TIMESTEPS};
use framer_loss::{FramerConfig, FramerDistiller, FramerLoss};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn serde_to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(v).map_err(runtime_err)?)
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(value_err)
}

fn image(shape: (usize, usize, usize), data: Vec<f64>) -> PyResult<Image> {
    Image::new(shape.0, shape.1, shape.2, data).map_err(value_err)
}

fn load_config(config: Option<&str>, sets: &[String]) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml_str(config.unwrap_or(""), sets).map_err(value_err)
}

/// Deterministic child seed.
#[pyfunction]
fn split_seed(seed: u64, index: u64) -> u64 {
    data::split_seed(seed, index)
}

/// A synthetic power-law RGB image as `(data, (3, size, size))`.
#[pyfunction]
fn synthetic_image(size: usize, seed: u64, index: u64) -> (Vec<f64>, (usize, usize, usize)) {
    let img = data::synthetic_image(size, seed, index);
    (img.data, (img.channels, img.height, img.width))
}

/// Unnormalized 2D DFT of one `h x w` plane as `(real, imag)`.
#[pyfunction]
fn fft2(plane: Vec<f64>, h: usize, w: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if plane.len() != h * w {
        return Err(value_err(format!("{} values for a {h}x{w} plane", plane.len())));
    }
    let spec = spectral::fft2(&plane, h, w);
    Ok((spec.iter().map(|c| c.re).collect(), spec.iter().map(|c| c.im).collect()))
}

/// Centered binary `(lf, hf)` masks.
#[pyfunction]
#[pyo3(signature = (h, w, radius = 0.2))]
fn band_masks(h: usize, w: usize, radius: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let m = BandMasks::new(h, w, radius).map_err(value_err)?;
    Ok((m.mask(Band::Lf).to_vec(), m.mask(Band::Hf).to_vec()))
}

/// Spatial LF and HF components of a feature whose last two axes are spatial.
#[pyfunction]
#[pyo3(signature = (data, shape, radius = 0.2))]
fn band_split(data: Vec<f64>, shape: Vec<usize>, radius: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let t = tensor(shape, data)?;
    let r = t.shape().len();
    if r < 2 {
        return Err(value_err("feature needs two spatial axes"));
    }
    let masks = BandMasks::new(t.shape()[r - 2], t.shape()[r - 1], radius).map_err(value_err)?;
    let pair = spectral::decompose(&t, &masks).map_err(value_err)?;
    Ok((pair.lf, pair.hf))
}

/// Mean masked spectral magnitude `(lf, hf)`.
#[pyfunction]
#[pyo3(signature = (data, shape, radius = 0.2))]
fn band_energy(data: Vec<f64>, shape: Vec<usize>, radius: f64) -> PyResult<(f64, f64)> {
    let t = tensor(shape, data)?;
    let r = t.shape().len();
    if r < 2 {
        return Err(value_err("feature needs two spatial axes"));
    }
    let masks = BandMasks::new(t.shape()[r - 2], t.shape()[r - 1], radius).map_err(value_err)?;
    spectral::band_energy(&t, &masks).map_err(value_err)
}

/// InfoNCE of a positive score against negative scores.
#[pyfunction]
fn info_nce(positive: f64, negatives: Vec<f64>, temperature: f64) -> PyResult<f64> {
    let mut g = Graph::new();
    let pos = g.constant(Tensor::scalar(positive));
    let negs: Vec<Var> = negatives.into_iter().map(|s| g.constant(Tensor::scalar(s))).collect();
    let l = framer_loss::info_nce(&mut g, pos, &negs, temperature).map_err(value_err)?;
    Ok(g.value(l).item())
}

/// FAW weights of a student feature against a teacher feature.
#[pyfunction]
#[pyo3(signature = (student, teacher, shape, radius = 0.2))]
fn faw_weights<'py>(
    py: Python<'py>,
    student: Vec<f64>,
    teacher: Vec<f64>,
    shape: Vec<usize>,
    radius: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let s = tensor(shape.clone(), student)?;
    let t = tensor(shape, teacher)?;
    let r = s.shape().len();
    if r < 2 {
        return Err(value_err("feature needs two spatial axes"));
    }
    let masks = BandMasks::new(s.shape()[r - 2], s.shape()[r - 1], radius).map_err(value_err)?;
    let w = framer_loss::faw_weights(&s, &t, &masks).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("w_lf", w.w_lf)?;
    d.set_item("w_hf", w.w_hf)?;
    d.set_item("delta_lf", w.delta_lf)?;
    d.set_item("delta_hf", w.delta_hf)?;
    Ok(d)
}

/// FRAMER loss over per-layer features, each of `shape = [B, C, H, W]` and
/// ordered shallow to deep. `config` is the JSON form of the loss config.
/// Returns the loss, its gradient with respect to every layer and the
/// per-layer records.
#[pyfunction]
#[pyo3(name = "framer_loss", signature = (features, shape, config = None, seed = 0))]
fn loss_of_layers<'py>(
    py: Python<'py>,
    features: Vec<Vec<f64>>,
    shape: Vec<usize>,
    config: Option<&str>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg: FramerConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(value_err)?,
        None => FramerConfig::default(),
    };
    if shape.len() != 4 {
        return Err(value_err("features must be [B, C, H, W]"));
    }
    let loss = FramerLoss::new(cfg, shape[2], shape[3]).map_err(value_err)?;
    let mut g = Graph::new();
    let vars = features
        .into_iter()
        .map(|f| Ok(g.param(tensor(shape.clone(), f)?)))
        .collect::<PyResult<Vec<Var>>>()?;
    let out = loss
        .compute(&mut g, &vars, &mut ChaCha8Rng::seed_from_u64(seed), None)
        .map_err(value_err)?;
    let d = PyDict::new(py);
    match out.loss {
        Some(l) => {
            g.backward(l).map_err(runtime_err)?;
            d.set_item("loss", g.value(l).item())?;
            let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).into_data()).collect();
            d.set_item("grads", grads)?;
        }
        None => {
            d.set_item("loss", 0.0)?;
            d.set_item("grads", py.None())?;
        }
    }
    d.set_item("records", serde_to_py(py, &out.records)?)?;
    Ok(d)
}

/// One HR/LR pair. `config` is a TOML experiment config whose
/// `[degradation]` section is used, cropped to the image size.
#[pyfunction]
#[pyo3(signature = (hr, shape, seed, config = None))]
fn degrade<'py>(
    py: Python<'py>,
    hr: Vec<f64>,
    shape: (usize, usize, usize),
    seed: u64,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let degradation: DegradationConfig = load_config(config, &[])?.degradation;
    let img = image(shape, hr)?;
    let pair = make_pair(&img, &degradation.with_crop(shape.1.min(shape.2)), seed).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("hr", pair.hr.data)?;
    d.set_item("lr", pair.lr.data)?;
    d.set_item("lr_shape", (pair.lr.channels, pair.lr.height, pair.lr.width))?;
    d.set_item("lr_resized", pair.lr_resized.data)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: Vec<f64>, b: Vec<f64>, peak: f64) -> PyResult<f64> {
    metrics::psnr(&a, &b, peak).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, shape, peak = 1.0))]
fn ssim(a: Vec<f64>, b: Vec<f64>, shape: (usize, usize, usize), peak: f64) -> PyResult<f64> {
    metrics::ssim(&image(shape, a)?, &image(shape, b)?, peak).map_err(value_err)
}

/// The full default experiment configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

/// Diffusion training with the FRAMER distiller attached.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: Trainer,
    distiller: FramerDistiller,
    next_step: u64,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (seed, config = None, sets = Vec::new(), out = None))]
    fn new(seed: u64, config: Option<&str>, sets: Vec<String>, out: Option<PathBuf>) -> PyResult<Self> {
        let cfg = load_config(config, &sets)?;
        let inner = commands::build_trainer(&cfg, seed, out.as_deref()).map_err(value_err)?;
        let distiller = FramerDistiller::new(cfg.effective_framer(), &cfg.backbone).map_err(value_err)?;
        Ok(Self {
            inner,
            distiller,
            next_step: 1,
        })
    }

    /// Runs the next optimizer step and returns its log entry.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let log = self
            .inner
            .step(self.next_step, Some(&mut self.distiller))
            .map_err(runtime_err)?;
        self.next_step += 1;
        serde_to_py(py, &log)
    }

    /// Runs the configured number of steps from scratch state onwards,
    /// writing artifacts when an output directory was given.
    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let logs = self.inner.run(Some(&mut self.distiller)).map_err(runtime_err)?;
        self.next_step = logs.last().map_or(self.next_step, |l| l.step + 1);
        serde_to_py(py, &logs)
    }

    /// Layer-wise LF/HF cosine to the final layer on the evaluation set.
    fn layer_curves<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        curves_to_py(py, &self.inner.layer_curves().map_err(runtime_err)?)
    }

    /// Parameter names and flat values.
    fn parameters(&self) -> Vec<(String, Vec<f64>)> {
        self.inner
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect()
    }
}

fn curves_to_py<'py>(py: Python<'py>, rows: &[framer_core::analysis::CurveRow]) -> PyResult<Bound<'py, PyAny>> {
    let list = PyList::empty(py);
    for r in rows {
        let d = PyDict::new(py);
        d.set_item("t", r.t)?;
        d.set_item("layer", r.layer)?;
        d.set_item("depth", r.depth)?;
        d.set_item("cos_lf", r.cos_lf)?;
        d.set_item("cos_hf", r.cos_hf)?;
        list.append(d)?;
    }
    Ok(list.into_any())
}

/// A trained or freshly initialized denoiser.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Loads a checkpoint manifest written by training.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Model::load(Path::new(&path)).map_err(value_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (seed, config = None, sets = Vec::new()))]
    fn untrained(seed: u64, config: Option<&str>, sets: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: Model::untrained(load_config(config, &sets)?, seed).map_err(value_err)?,
        })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.config.backbone.image_size
    }

    /// Super-resolves LR images given as `(data, (3, h, w))` pairs.
    #[pyo3(signature = (lrs, seed, sampler = None, steps = None))]
    fn sample(
        &self,
        lrs: Vec<(Vec<f64>, (usize, usize, usize))>,
        seed: u64,
        sampler: Option<&str>,
        steps: Option<usize>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let mut sc = self.inner.config.sampler.clone();
        match sampler {
            Some("ddpm") => sc.kind = SamplerKind::Ddpm,
            Some("ddim") => sc.kind = SamplerKind::Ddim,
            Some(other) => return Err(value_err(format!("unknown sampler {other:?}"))),
            None => {}
        }
        if let Some(k) = steps {
            sc.steps = k;
        }
        let imgs = lrs
            .into_iter()
            .map(|(d, s)| image(s, d))
            .collect::<PyResult<Vec<_>>>()?;
        let out = commands::sample_images(&self.inner.snapshot(), &self.inner.schedule, &sc, &imgs, seed)
            .map_err(runtime_err)?;
        Ok(out.into_iter().map(|i| i.data).collect())
    }

    #[pyo3(signature = (seed, samples = 16, timesteps = CURVE_TIMESTEPS.to_vec(), radius = 0.2))]
    fn layer_curves<'py>(
        &self,
        py: Python<'py>,
        seed: u64,
        samples: usize,
        timesteps: Vec<usize>,
        radius: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let rows = commands::analyze_layers(&self.inner, seed, &timesteps, samples, radius).map_err(runtime_err)?;
        curves_to_py(py, &rows)
    }
}

#[pymodule]
pub fn framer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(split_seed, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_image, m)?)?;
    m.add_function(wrap_pyfunction!(fft2, m)?)?;
    m.add_function(wrap_pyfunction!(band_masks, m)?)?;
    m.add_function(wrap_pyfunction!(band_split, m)?)?;
    m.add_function(wrap_pyfunction!(band_energy, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(faw_weights, m)?)?;
    m.add_function(wrap_pyfunction!(loss_of_layers, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
