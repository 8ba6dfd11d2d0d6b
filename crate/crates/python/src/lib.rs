//! Python bindings. Images cross the boundary as flat row-major `float`
//! lists plus a `(channels, height, width)` shape.

use std::sync::Arc;

use aberration_core::adapt::{self, Objective, Param, RefineConfig};
use aberration_core::hyper::{self, ScheduleSpec};
use aberration_core::projector::{self, Architecture, CnnWeights, Projector, DEFAULT_TV_ITERATIONS};
use aberration_core::psf::{self, GaussianMapSpec};
use aberration_core::solver::{SolverConfig, DEFAULT_STAGES};
use aberration_core::{metrics, synthetic, Error, NoiseSpec};
use ndarray::Array3;
use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

create_exception!(aberration, AberrationError, PyValueError);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => AberrationError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Image", module = "aberration", frozen, from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: aberration_core::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(data: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<Self> {
        let inner = Array3::from_shape_vec(shape, data)
            .map_err(|e| AberrationError::new_err(format!("image data does not match shape {shape:?}: {e}")))?;
        Ok(PyImage { inner })
    }

    /// Procedural 3-channel test scene.
    #[staticmethod]
    #[pyo3(signature = (height, width, seed = 0))]
    fn synthetic(height: usize, width: usize, seed: u64) -> Self {
        PyImage {
            inner: synthetic::scene(height, width, seed),
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.dim()
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.iter().copied().collect()
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.inner.dim();
        format!("Image(channels={c}, height={h}, width={w})")
    }
}

#[pyclass(name = "PsfMap", module = "aberration", frozen)]
struct PyPsfMap {
    inner: psf::PsfMap,
}

#[pymethods]
impl PyPsfMap {
    #[staticmethod]
    #[pyo3(signature = (rows = 16, cols = 16, channels = 3, size = 25, sigma_min = 1.0, sigma_max = 3.0, seed = 0))]
    fn synth_gaussian(
        rows: usize,
        cols: usize,
        channels: usize,
        size: usize,
        sigma_min: f64,
        sigma_max: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = GaussianMapSpec {
            rows,
            cols,
            channels,
            size,
            sigma_min,
            sigma_max,
            seed,
        };
        Ok(PyPsfMap {
            inner: psf::synth_gaussian_map(&spec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyPsfMap {
            inner: psf::load_psf_map(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        psf::save_psf_map(&self.inner, path).map_err(err)
    }

    #[getter]
    fn grid_rows(&self) -> usize {
        self.inner.grid_rows
    }

    #[getter]
    fn grid_cols(&self) -> usize {
        self.inner.grid_cols
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn kernel_size(&self) -> (usize, usize) {
        self.inner.kernel_dims()
    }

    /// Kernel taps as a list of rows.
    fn kernel(&self, row: usize, col: usize, channel: usize) -> PyResult<Vec<Vec<f32>>> {
        let m = &self.inner;
        if row >= m.grid_rows || col >= m.grid_cols || channel >= m.channels {
            return Err(AberrationError::new_err(format!("no kernel at ({row}, {col}, {channel})")));
        }
        Ok(m.kernel(row, col, channel).taps().outer_iter().map(|r| r.to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        let m = &self.inner;
        let (kh, kw) = m.kernel_dims();
        format!("PsfMap({}x{} cells, {} channels, {kh}x{kw} kernels)", m.grid_rows, m.grid_cols, m.channels)
    }
}

#[pyclass(name = "Schedules", module = "aberration", frozen)]
struct PySchedules {
    inner: hyper::HyperParamMap,
}

#[pymethods]
impl PySchedules {
    /// Log-spaced μ/λ schedules, uniform over the PSF grid.
    #[staticmethod]
    #[pyo3(signature = (stages, psf, mu_first = None, mu_last = None, lambda_first = None, lambda_last = None))]
    fn default(
        stages: usize,
        psf: &PyPsfMap,
        mu_first: Option<f64>,
        mu_last: Option<f64>,
        lambda_first: Option<f64>,
        lambda_last: Option<f64>,
    ) -> PyResult<Self> {
        let d = ScheduleSpec::default();
        let spec = ScheduleSpec {
            mu_first: mu_first.unwrap_or(d.mu_first),
            mu_last: mu_last.unwrap_or(d.mu_last),
            lambda_first: lambda_first.unwrap_or(d.lambda_first),
            lambda_last: lambda_last.unwrap_or(d.lambda_last),
        };
        Ok(PySchedules {
            inner: hyper::schedules_from(stages, &psf.inner, &spec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PySchedules {
            inner: hyper::load_hyper_map(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        hyper::save_hyper_map(&self.inner, path).map_err(err)
    }

    /// `(stages, rows, cols, channels)`
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let m = &self.inner;
        (m.stages, m.rows, m.cols, m.channels)
    }

    #[getter]
    fn mu(&self) -> Vec<f32> {
        self.inner.mu.clone()
    }

    #[getter]
    fn lam(&self) -> Vec<f32> {
        self.inner.lambda.clone()
    }

    fn __repr__(&self) -> String {
        let (s, r, c, ch) = self.shape();
        format!("Schedules(stages={s}, grid={r}x{c}, channels={ch})")
    }
}

#[pyclass(name = "CnnWeights", module = "aberration", frozen)]
struct PyCnnWeights {
    inner: Arc<CnnWeights>,
}

#[pymethods]
impl PyCnnWeights {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyCnnWeights {
            inner: Arc::new(projector::load_weights(path).map_err(err)?),
        })
    }

    /// Seeded random weights, mainly for tests.
    #[staticmethod]
    #[pyo3(signature = (seed, widths = vec![32, 64, 128], blocks_per_scale = 2))]
    fn random(seed: u64, widths: Vec<usize>, blocks_per_scale: usize) -> PyResult<Self> {
        let arch = Architecture {
            scales: widths.len(),
            widths,
            blocks_per_scale,
        };
        Ok(PyCnnWeights {
            inner: Arc::new(CnnWeights::random(arch, seed).map_err(err)?),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        projector::save_weights(&self.inner, path).map_err(err)
    }

    #[getter]
    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensors().iter().map(|t| t.name.clone()).collect()
    }
}

fn make_projector(kind: &str, weights: Option<&PyCnnWeights>, tv_iters: usize) -> PyResult<Projector> {
    match kind {
        "identity" => Ok(Projector::Identity),
        "tv" => Ok(Projector::Tv { iterations: tv_iters }),
        "cnn" => weights
            .map(|w| Projector::Cnn(Arc::clone(&w.inner)))
            .ok_or_else(|| AberrationError::new_err("the cnn projector needs weights")),
        other => Err(AberrationError::new_err(format!(
            "unknown projector `{other}` (identity, tv or cnn)"
        ))),
    }
}

type TraceRow = (usize, &'static str, usize, f64, bool, f64);

fn make_objective(name: &str) -> PyResult<Objective> {
    match name {
        "psnr" => Ok(Objective::Psnr),
        "l1" => Ok(Objective::L1),
        other => Err(AberrationError::new_err(format!("unknown objective `{other}` (psnr or l1)"))),
    }
}

fn unpack_pairs(pairs: Vec<(PyImage, PyImage)>) -> Vec<(aberration_core::Image, aberration_core::Image)> {
    pairs.into_iter().map(|(y, x)| (y.inner, x.inner)).collect()
}

/// Blurs with the PSF map and adds noise (`"none"` or `"gaussian:S[:seed=N]"`).
#[pyfunction]
#[pyo3(signature = (image, psf, noise = "none"))]
fn degrade(py: Python<'_>, image: &PyImage, psf: &PyPsfMap, noise: &str) -> PyResult<PyImage> {
    let noise: NoiseSpec = noise.parse().map_err(err)?;
    let inner = py.detach(|| aberration_core::degrade(&image.inner, &psf.inner, &noise)).map_err(err)?;
    Ok(PyImage { inner })
}

/// Restores a degraded image; output is clamped to `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (image, psf, projector = "tv", stages = DEFAULT_STAGES, schedules = None, weights = None, tv_iters = DEFAULT_TV_ITERATIONS, pad = None))]
#[allow(clippy::too_many_arguments)]
fn deconv(
    py: Python<'_>,
    image: &PyImage,
    psf: &PyPsfMap,
    projector: &str,
    stages: usize,
    schedules: Option<&PySchedules>,
    weights: Option<&PyCnnWeights>,
    tv_iters: usize,
    pad: Option<usize>,
) -> PyResult<PyImage> {
    let schedules = match schedules {
        Some(s) => s.inner.clone(),
        None => hyper::default_schedules(stages, &psf.inner).map_err(err)?,
    };
    let config = SolverConfig {
        stages: schedules.stages.min(stages),
        pad,
        schedules,
        projector: make_projector(projector, weights, tv_iters)?,
    };
    let inner = py.detach(|| aberration_core::solve(&image.inner, &psf.inner, &config)).map_err(err)?;
    Ok(PyImage { inner })
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: &PyImage, b: &PyImage, peak: f64) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner, peak).map_err(err)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).map_err(err)
}

/// Mean objective of restorations of `pairs` (degraded, sharp).
#[pyfunction]
#[pyo3(signature = (psf, pairs, schedules, projector = "tv", weights = None, objective = "psnr"))]
fn evaluate_map(
    py: Python<'_>,
    psf: &PyPsfMap,
    pairs: Vec<(PyImage, PyImage)>,
    schedules: &PySchedules,
    projector: &str,
    weights: Option<&PyCnnWeights>,
    objective: &str,
) -> PyResult<f64> {
    let projector = make_projector(projector, weights, DEFAULT_TV_ITERATIONS)?;
    let objective = make_objective(objective)?;
    let pairs = unpack_pairs(pairs);
    py.detach(|| adapt::evaluate_map(&psf.inner, &pairs, &schedules.inner, &projector, objective))
        .map_err(err)
}

/// Refines `init` on the pairs. Returns the refined schedules and the trace
/// as `(iteration, param, cell, factor, accepted, objective)` tuples.
#[pyfunction]
#[pyo3(signature = (psf, pairs, init, projector = "tv", weights = None, max_iters = 60, step_factor = 2.0, patience = 2, objective = "psnr"))]
#[allow(clippy::too_many_arguments)]
fn refine(
    py: Python<'_>,
    psf: &PyPsfMap,
    pairs: Vec<(PyImage, PyImage)>,
    init: &PySchedules,
    projector: &str,
    weights: Option<&PyCnnWeights>,
    max_iters: usize,
    step_factor: f64,
    patience: usize,
    objective: &str,
) -> PyResult<(PySchedules, Vec<TraceRow>)> {
    let projector = make_projector(projector, weights, DEFAULT_TV_ITERATIONS)?;
    let config = RefineConfig {
        max_iters,
        step_factor,
        patience,
        objective: make_objective(objective)?,
        ..Default::default()
    };
    let pairs = unpack_pairs(pairs);
    let outcome = py
        .detach(|| adapt::refine(&psf.inner, &pairs, &init.inner, &config, &projector))
        .map_err(err)?;
    let trace = outcome
        .trace
        .iter()
        .map(|t| {
            let param = match t.param {
                Param::Mu => "mu",
                Param::Lambda => "lambda",
            };
            (t.iteration, param, t.cell, t.factor, t.accepted, t.objective)
        })
        .collect();
    Ok((PySchedules { inner: outcome.map }, trace))
}

#[pymodule]
fn aberration(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AberrationError", m.py().get_type::<AberrationError>())?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyPsfMap>()?;
    m.add_class::<PySchedules>()?;
    m.add_class::<PyCnnWeights>()?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(deconv, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_map, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    Ok(())
}
