//! Isotropic total-variation proximal operator with a spatially varying
//! weight, solved by projected gradient on the dual.
//!
//! For each channel it approximates
//! `argmin_x ½‖x − z‖² + Σᵢ λᵢ·|(∇x)ᵢ|`
//! by iterating `p ← Π(p + τ∇x)`, `x = z − ∇ᵀp`, where `Π` clips each dual
//! vector to the disc of radius `λᵢ` and `τ = 1/8`.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use super::ProjectorInput;
use crate::error::{Error, Result};
use crate::image::{ensure_finite, Image};

pub const DEFAULT_TV_ITERATIONS: usize = 30;

const DUAL_STEP: f64 = 1.0 / 8.0;

/// Forward differences with a zero gradient past the last row/column.
pub(crate) fn gradient(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = x.dim();
    let mut gy = Array2::zeros((h, w));
    let mut gx = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if r + 1 < h {
                gy[[r, c]] = x[[r + 1, c]] - x[[r, c]];
            }
            if c + 1 < w {
                gx[[r, c]] = x[[r, c + 1]] - x[[r, c]];
            }
        }
    }
    (gy, gx)
}

/// Adjoint of [`gradient`].
pub(crate) fn gradient_adjoint(py: &Array2<f64>, px: &Array2<f64>) -> Array2<f64> {
    let (h, w) = py.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut v = 0.0;
            if r + 1 < h {
                v -= py[[r, c]];
            }
            if r > 0 {
                v += py[[r - 1, c]];
            }
            if c + 1 < w {
                v -= px[[r, c]];
            }
            if c > 0 {
                v += px[[r, c - 1]];
            }
            out[[r, c]] = v;
        }
    }
    out
}

/// Weighted isotropic TV of one plane.
pub fn tv_seminorm(x: &ArrayView2<'_, f32>, lambda: &ArrayView2<'_, f32>) -> f64 {
    let (gy, gx) = gradient(&x.mapv(f64::from));
    Zip::from(&gy)
        .and(&gx)
        .and(lambda)
        .fold(0.0, |acc, a, b, &l| acc + l as f64 * (a * a + b * b).sqrt())
}

fn prox_plane(z: &ArrayView2<'_, f32>, lambda: &ArrayView2<'_, f32>, iterations: usize) -> Array2<f32> {
    let z = z.mapv(f64::from);
    let lambda = lambda.mapv(f64::from);
    let (h, w) = z.dim();
    let mut py = Array2::<f64>::zeros((h, w));
    let mut px = Array2::zeros((h, w));
    let mut x = z.clone();
    for _ in 0..iterations {
        let (gy, gx) = gradient(&x);
        Zip::from(&mut py)
            .and(&mut px)
            .and(&gy)
            .and(&gx)
            .and(&lambda)
            .for_each(|py, px, &gy, &gx, &l| {
                let ny: f64 = *py + DUAL_STEP * gy;
                let nx: f64 = *px + DUAL_STEP * gx;
                let norm = (ny * ny + nx * nx).sqrt();
                let scale: f64 = if norm > l { l / norm } else { 1.0 };
                *py = ny * scale;
                *px = nx * scale;
            });
        x = &z - &gradient_adjoint(&py, &px);
    }
    x.mapv(|v| v as f32)
}

pub fn project_tv(input: &ProjectorInput, iterations: usize) -> Result<Image> {
    if iterations == 0 {
        return Err(Error::InvalidRange("tv projector needs at least one iteration".into()));
    }
    ensure_finite(&input.z, "tv projector input")?;
    let planes: Vec<Array2<f32>> = (0..input.z.len_of(Axis(0)))
        .into_par_iter()
        .map(|ch| {
            prox_plane(
                &input.z.index_axis(Axis(0), ch),
                &input.lambda.index_axis(Axis(0), ch),
                iterations,
            )
        })
        .collect();
    let mut out = Image::zeros(input.z.dim());
    for (ch, plane) in planes.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), ch).assign(&plane);
    }
    Ok(out)
}
