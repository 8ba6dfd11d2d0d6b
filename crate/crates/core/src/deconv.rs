//! Closed-form frequency-domain z-update for one patch and channel.
//!
//! Under circular boundary conditions the quadratic subproblem
//! `min_z ‖k ⊗ z − y‖² + μ‖z − x‖²` is diagonalized by the DFT:
//!
//! ```text
//! z = F⁻¹( (conj(F(k))·F(y) + μ·F(x)) / (|F(k)|² + μ) )
//! ```
//!
//! Transforms run in `f64`; patches enter and leave as `f32`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::psf::Kernel;

/// Spectral bins with `|F(k)|²` at or below this count as zeros.
const SPECTRUM_ZERO: f64 = 1e-12;

/// Forward and inverse 2-D DFT plans for one array size.
pub struct Fft2d {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2d")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl Fft2d {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2d {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn run(&self, data: &mut Array2<Complex64>, inverse: bool) {
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        let buf = data.as_slice_mut().expect("standard layout");
        row.process(buf);
        let mut t = transpose(buf, self.height, self.width);
        col.process(&mut t);
        let back = transpose(&t, self.width, self.height);
        buf.copy_from_slice(&back);
    }

    pub fn forward(&self, input: &ArrayView2<'_, f32>) -> Array2<Complex64> {
        let mut data = input.mapv(|v| Complex64::new(v as f64, 0.0));
        if !data.is_standard_layout() {
            data = data.as_standard_layout().to_owned();
        }
        self.run(&mut data, false);
        data
    }

    /// Unnormalized transform on a complex array, then scaled by `1/(h·w)`.
    pub fn inverse(&self, mut spectrum: Array2<Complex64>) -> Array2<Complex64> {
        self.run(&mut spectrum, true);
        let scale = 1.0 / (self.height * self.width) as f64;
        spectrum.mapv_inplace(|v| v * scale);
        spectrum
    }
}

fn transpose(buf: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); buf.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = buf[r * cols + c];
        }
    }
    out
}

/// Shared plan cache keyed by array size.
#[derive(Debug, Default)]
pub struct PlanCache {
    plans: Mutex<HashMap<(usize, usize), Arc<Fft2d>>>,
}

impl PlanCache {
    pub fn get(&self, height: usize, width: usize) -> Arc<Fft2d> {
        let mut plans = self.plans.lock().expect("plan cache poisoned");
        plans
            .entry((height, width))
            .or_insert_with(|| Arc::new(Fft2d::new(height, width)))
            .clone()
    }
}

/// Embeds a kernel in an `height`×`width` zero array with its center tap
/// circularly shifted to the origin.
pub fn embed_kernel(kernel: &Kernel, height: usize, width: usize) -> Result<Array2<f32>> {
    let (kh, kw) = (kernel.height(), kernel.width());
    if kh > height || kw > width {
        return Err(Error::KernelTooLarge {
            kernel_h: kh,
            kernel_w: kw,
            patch_h: height,
            patch_w: width,
        });
    }
    let (ch, cw) = (kh / 2, kw / 2);
    let mut out = Array2::zeros((height, width));
    for ((i, j), &t) in kernel.taps().indexed_iter() {
        let r = (i + height - ch) % height;
        let c = (j + width - cw) % width;
        out[[r, c]] += t;
    }
    Ok(out)
}

/// Spectra of one degraded patch channel and its kernel.
#[derive(Debug, Clone)]
pub struct PatchSpectra {
    pub kernel: Array2<Complex64>,
    pub observed: Array2<Complex64>,
    /// `|F(k)|²`
    pub kernel_power: Array2<f64>,
    /// `conj(F(k))·F(y)`
    pub data_term: Array2<Complex64>,
    plan: Arc<Fft2d>,
}

pub fn precompute_spectra(patch_y: &ArrayView2<'_, f32>, kernel: &Kernel) -> Result<PatchSpectra> {
    let (h, w) = patch_y.dim();
    precompute_spectra_with(Arc::new(Fft2d::new(h, w)), patch_y, kernel)
}

pub fn precompute_spectra_with(plan: Arc<Fft2d>, patch_y: &ArrayView2<'_, f32>, kernel: &Kernel) -> Result<PatchSpectra> {
    let (h, w) = patch_y.dim();
    if plan.dims() != (h, w) {
        return Err(Error::dims(format!("plan {:?} for patch {h}x{w}", plan.dims())));
    }
    if !patch_y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("degraded patch".into()));
    }
    let embedded = embed_kernel(kernel, h, w)?;
    let fk = plan.forward(&embedded.view());
    let fy = plan.forward(patch_y);
    let kernel_power = fk.mapv(|v| v.norm_sqr());
    let data_term = ndarray::Zip::from(&fk).and(&fy).map_collect(|k, y| k.conj() * y);
    Ok(PatchSpectra {
        kernel: fk,
        observed: fy,
        kernel_power,
        data_term,
        plan,
    })
}

impl PatchSpectra {
    pub fn dims(&self) -> (usize, usize) {
        self.kernel.dim()
    }

    /// Complex result of the update before taking the real part.
    pub fn solve_complex(&self, x_prev: &ArrayView2<'_, f32>, mu: f64) -> Result<Array2<Complex64>> {
        if !mu.is_finite() || mu < 0.0 {
            return Err(Error::IllPosed(format!("penalty weight must be finite and >= 0, got {mu}")));
        }
        if x_prev.dim() != self.dims() {
            return Err(Error::dims(format!(
                "previous estimate is {:?}, spectra are {:?}",
                x_prev.dim(),
                self.dims()
            )));
        }
        if !x_prev.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("previous estimate".into()));
        }
        if mu == 0.0 && self.kernel_power.iter().any(|&p| p <= SPECTRUM_ZERO) {
            return Err(Error::IllPosed("zero penalty with zeros in the kernel spectrum".into()));
        }
        let fx = self.plan.forward(x_prev);
        let spectrum = ndarray::Zip::from(&self.data_term)
            .and(&fx)
            .and(&self.kernel_power)
            .map_collect(|d, x, p| (d + x * mu) / (p + mu));
        Ok(self.plan.inverse(spectrum))
    }
}

pub fn z_update(spectra: &PatchSpectra, x_prev: &ArrayView2<'_, f32>, mu: f64) -> Result<Array2<f32>> {
    Ok(spectra.solve_complex(x_prev, mu)?.mapv(|v| v.re as f32))
}

/// First-stage update with a zero previous estimate: a Wiener filter with
/// noise-to-signal ratio `mu`.
pub fn wiener_init(spectra: &PatchSpectra, mu: f64) -> Result<Array2<f32>> {
    if !(mu > 0.0) {
        return Err(Error::IllPosed(format!("wiener filter needs mu > 0, got {mu}")));
    }
    z_update(spectra, &Array2::zeros(spectra.dims()).view(), mu)
}
