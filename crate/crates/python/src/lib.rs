//! Python bindings. Images cross the boundary as `(data, width, height)`
//! with `data` a flat row-major RGB list of floats in [0, 1].

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use voxray::metrics;
use voxray::render::{self, Model};
use voxray::scene::{self, Dataset, Image, Manifest};
use voxray::trainer::{Phase, TrainConfig, Trainer};

fn py_err(e: voxray::Error) -> PyErr {
    match e {
        voxray::Error::InvalidArgument(_) | voxray::Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type PyImage = (Vec<f32>, usize, usize);

fn to_image((data, w, h): PyImage) -> PyResult<Image> {
    Image::new(w, h, data).map_err(py_err)
}

fn from_image(img: &Image) -> PyImage {
    (img.data().to_vec(), img.width(), img.height())
}

/// Writes a toy scene (train/test/sweep manifests and PNGs) to `out`.
#[pyfunction]
#[pyo3(signature = (out, views = 20, res = 128, seed = 0))]
fn generate_scene(out: PathBuf, views: usize, res: usize, seed: u64) -> PyResult<()> {
    scene::generate_toy_scene(&out, views, res, seed).map_err(py_err)?;
    Ok(())
}

/// Training configuration as JSON: the desk profile, or `overrides` merged
/// over a profile.
#[pyfunction]
#[pyo3(signature = (overrides = None))]
fn train_config(overrides: Option<&str>) -> PyResult<String> {
    let cfg = match overrides {
        Some(text) => TrainConfig::from_json(text),
        None => Ok(TrainConfig::desk()),
    }
    .map_err(py_err)?;
    cfg.to_json().map_err(py_err)
}

#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: Trainer,
    data: Dataset,
}

#[pymethods]
impl PyTrainer {
    /// `config` is JSON as accepted by `train_config`; `data` a scene
    /// directory or manifest.
    #[new]
    #[pyo3(signature = (data, config = None))]
    fn new(data: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => TrainConfig::from_json(text).map_err(py_err)?,
            None => TrainConfig::desk(),
        };
        let ds = Dataset::load(&data, cfg.scale).map_err(py_err)?;
        let inner = Trainer::new(cfg, &ds).map_err(py_err)?;
        Ok(Self { inner, data: ds })
    }

    #[staticmethod]
    fn resume(checkpoint: PathBuf, data: PathBuf) -> PyResult<Self> {
        let inner = Trainer::load(&checkpoint).map_err(py_err)?;
        let ds = Dataset::load(&data, inner.config.scale).map_err(py_err)?;
        Ok(Self { inner, data: ds })
    }

    /// Runs up to `max_steps` iterations (all remaining by default).
    #[pyo3(signature = (max_steps = None, checkpoint = None))]
    fn run(&mut self, py: Python<'_>, max_steps: Option<usize>, checkpoint: Option<PathBuf>) -> PyResult<()> {
        let (inner, data) = (&mut self.inner, &self.data);
        py.detach(|| inner.run(data, checkpoint.as_deref(), max_steps)).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn global_step(&self) -> usize {
        self.inner.global_step()
    }

    #[getter]
    fn phase(&self) -> &'static str {
        match self.inner.progress.phase {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
            Phase::Done => "done",
        }
    }

    #[getter]
    fn loss_trace(&self) -> Vec<f64> {
        self.inner.loss_trace.clone()
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        self.inner.config.to_json().map_err(py_err)
    }
}

#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Model::load(&path).map_err(py_err)? })
    }

    #[getter]
    fn scale(&self) -> usize {
        self.inner.scale()
    }

    /// Renders frame `index` of a camera manifest. Returns the full-res
    /// image and the encoder's low-res render.
    #[pyo3(signature = (manifest, index, chunk = 4096))]
    fn render(&self, py: Python<'_>, manifest: PathBuf, index: usize, chunk: usize) -> PyResult<(PyImage, PyImage)> {
        let m = Manifest::read(&manifest).map_err(py_err)?;
        let base = manifest.parent().map(PathBuf::from).unwrap_or_default();
        let cams = m.cameras(&base).map_err(py_err)?;
        let cam = cams
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("pose {index} out of range; manifest has {} frames", cams.len())))?;
        let r = py.detach(|| render::render_view(&self.inner, cam, chunk)).map_err(py_err)?;
        Ok((from_image(&r.image), from_image(&r.low.rgb)))
    }

    /// Per-view and mean PSNR/SSIM on a split of a scene directory.
    #[pyo3(signature = (data, split = "test", chunk = 4096))]
    fn evaluate<'py>(&self, py: Python<'py>, data: PathBuf, split: &str, chunk: usize) -> PyResult<Bound<'py, PyDict>> {
        let ds = Dataset::load_split(&data, split, self.inner.scale()).map_err(py_err)?;
        let report = py.detach(|| metrics::evaluate(&self.inner, &ds, chunk)).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("mean_psnr", report.mean_psnr)?;
        d.set_item("mean_ssim", report.mean_ssim)?;
        d.set_item("mean_psnr_bicubic", report.mean_psnr_bicubic)?;
        d.set_item("mean_ssim_bicubic", report.mean_ssim_bicubic)?;
        d.set_item("mean_psnr_low", report.mean_psnr_low)?;
        d.set_item("views", report.views.iter().map(|v| v.name.clone()).collect::<Vec<_>>())?;
        Ok(d)
    }
}

#[pyfunction]
fn psnr(a: PyImage, b: PyImage) -> PyResult<f64> {
    metrics::psnr(&to_image(a)?, &to_image(b)?).map_err(py_err)
}

#[pyfunction]
fn ssim(a: PyImage, b: PyImage) -> PyResult<f64> {
    metrics::ssim(&to_image(a)?, &to_image(b)?).map_err(py_err)
}

#[pyfunction]
fn bicubic_upscale(img: PyImage, factor: usize) -> PyResult<PyImage> {
    render::bicubic_upscale(&to_image(img)?, factor).map(|i| from_image(&i)).map_err(py_err)
}

/// Column `column` of every frame, stacked left to right.
#[pyfunction]
#[pyo3(signature = (frames, column, height = None))]
fn consistency_strip(frames: Vec<PyImage>, column: usize, height: Option<usize>) -> PyResult<PyImage> {
    let frames = frames.into_iter().map(to_image).collect::<PyResult<Vec<_>>>()?;
    let h = height.unwrap_or_else(|| frames.first().map_or(0, Image::height));
    metrics::consistency_strip(&frames, column, h).map(|i| from_image(&i)).map_err(py_err)
}

/// Finite-difference gradient checks: `(module, name, max_error)` per case.
#[pyfunction]
#[pyo3(signature = (module = None, instances = 2))]
fn gradcheck(py: Python<'_>, module: Option<&str>, instances: usize) -> PyResult<Vec<(String, String, f64)>> {
    let results = py.detach(|| voxray::gradcheck::run_suite(module, instances)).map_err(py_err)?;
    Ok(results.into_iter().map(|r| (r.module.to_string(), r.name.to_string(), r.max_error)).collect())
}

#[pymodule]
fn voxray_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(train_config, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic_upscale, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_strip, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
