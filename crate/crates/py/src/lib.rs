//! Python bindings: metrics on PNG files or raw RGB buffers, synthetic data,
//! and checkpoint inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use spagan_core::attention_net::{Generator, GeneratorConfig, ParamTree};
use spagan_core::data::{self, ImageU8};
use spagan_core::metrics::{self, SsimMode};
use spagan_core::numerics::NumericMode;
use spagan_core::trainer::{load_checkpoint, TrainConfig};
use spagan_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) | Error::Image { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn ssim_mode(mode: &str) -> PyResult<SsimMode> {
    match mode {
        "windowed" => Ok(SsimMode::Windowed),
        "global" => Ok(SsimMode::Global),
        _ => Err(PyValueError::new_err(format!(
            "ssim mode must be 'windowed' or 'global', got {mode:?}"
        ))),
    }
}

fn image(rgb: &[u8], width: usize, height: usize) -> PyResult<ImageU8> {
    ImageU8::new(width, height, rgb.to_vec()).map_err(to_py)
}

/// PSNR in dB of two packed RGB buffers; `inf` when identical.
#[pyfunction]
fn psnr(a: &[u8], b: &[u8], width: usize, height: usize) -> PyResult<f64> {
    let p = metrics::psnr(&image(a, width, height)?, &image(b, width, height)?).map_err(to_py)?;
    Ok(p.value())
}

/// Mean per-channel SSIM of two packed RGB buffers.
#[pyfunction]
#[pyo3(signature = (a, b, width, height, mode = "windowed"))]
fn ssim(a: &[u8], b: &[u8], width: usize, height: usize, mode: &str) -> PyResult<f64> {
    metrics::ssim(&image(a, width, height)?, &image(b, width, height)?, ssim_mode(mode)?)
        .map_err(to_py)
}

/// `(psnr_db, ssim)` of a prediction PNG against its ground truth PNG.
#[pyfunction]
#[pyo3(signature = (pred, gt, mode = "windowed"))]
fn score_png(pred: PathBuf, gt: PathBuf, mode: &str) -> PyResult<(f64, f64)> {
    let p = ImageU8::load_png(&pred).map_err(to_py)?;
    let g = ImageU8::load_png(&gt).map_err(to_py)?;
    let db = metrics::psnr(&p, &g).map_err(to_py)?.value();
    let s = metrics::ssim(&p, &g, ssim_mode(mode)?).map_err(to_py)?;
    Ok((db, s))
}

/// Write `count` synthetic pairs in the RICE layout under `out`.
#[pyfunction]
#[pyo3(signature = (out, count, size = 64, seed = 0))]
fn synth_dataset(out: PathBuf, count: usize, size: usize, seed: u64) -> PyResult<()> {
    data::write_synthetic_dataset(&out, count, size, seed).map_err(to_py)
}

/// Default training configuration as `{key: value}` strings.
#[pyfunction]
#[pyo3(signature = (desk = false))]
fn default_config(desk: bool) -> Vec<(String, String)> {
    let c = if desk {
        TrainConfig::desk()
    } else {
        TrainConfig::default()
    };
    c.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// A generator restored from a training checkpoint.
#[pyclass(frozen)]
struct Model {
    generator: Generator,
    params: ParamTree,
    step: u64,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(ckpt: PathBuf) -> PyResult<Self> {
        let c = load_checkpoint(&ckpt).map_err(to_py)?;
        let generator = Generator::new(c.config.generator_config()).map_err(to_py)?;
        Ok(Model {
            generator,
            params: c.state.generator,
            step: c.state.step,
        })
    }

    /// An untrained generator, e.g. for checking shapes.
    #[staticmethod]
    #[pyo3(signature = (width = 8, seed = 0))]
    fn untrained(width: usize, seed: u64) -> PyResult<Self> {
        let generator = Generator::new(GeneratorConfig::with_width(width)).map_err(to_py)?;
        let params = generator.init_params(seed);
        Ok(Model {
            generator,
            params,
            step: 0,
        })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.step
    }

    #[getter]
    fn width(&self) -> usize {
        self.generator.config().base_width
    }

    /// Cloud-free RGB bytes plus four attention maps (row-major floats).
    fn infer<'py>(
        &self,
        py: Python<'py>,
        rgb: &[u8],
        width: usize,
        height: usize,
    ) -> PyResult<(Bound<'py, PyBytes>, Vec<Vec<f64>>)> {
        let img = image(rgb, width, height)?;
        let (out, maps) = py
            .detach(|| {
                self.generator
                    .infer(&self.params, &data::to_tensor(&img), NumericMode::Fast)
            })
            .map_err(to_py)?;
        let out = data::from_tensor(&out).map_err(to_py)?;
        let maps = maps.into_iter().map(|m| m.into_tensor().into_data()).collect();
        Ok((PyBytes::new(py, out.data()), maps))
    }

    /// Read a PNG, remove clouds and write the result.
    fn infer_png(&self, py: Python<'_>, src: PathBuf, dst: PathBuf) -> PyResult<()> {
        py.detach(|| {
            let img = ImageU8::load_png(&src)?;
            let (out, _) =
                self.generator
                    .infer(&self.params, &data::to_tensor(&img), NumericMode::Fast)?;
            data::from_tensor(&out)?.save_png(&dst)
        })
        .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model(width={}, step={})", self.width(), self.step)
    }
}

#[pymodule]
fn spagan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(score_png, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
