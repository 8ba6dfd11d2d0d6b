//! Planar float images.
//!
//! Images are stored as `(channels, height, width)` arrays of `f32` with a
//! nominal intensity range of `[0, 1]`.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

pub type Image = Array3<f32>;

pub fn dims(image: &Image) -> (usize, usize, usize) {
    image.dim()
}

pub fn ensure_finite(image: &Image, what: &str) -> Result<()> {
    if image.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn ensure_same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dims(format!(
            "image dims {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub fn clamp_unit(image: &mut Image) {
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Reads a plane with coordinates clamped into bounds (edge replication).
#[inline]
pub(crate) fn replicated(plane: &ArrayView2<'_, f32>, row: isize, col: isize) -> f32 {
    let (h, w) = plane.dim();
    let r = row.clamp(0, h as isize - 1) as usize;
    let c = col.clamp(0, w as isize - 1) as usize;
    plane[[r, c]]
}

/// Pads a plane by `pad` on every side using edge replication.
pub fn pad_replicate(plane: &ArrayView2<'_, f32>, pad_top: usize, pad_bottom: usize, pad_left: usize, pad_right: usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h + pad_top + pad_bottom, w + pad_left + pad_right), |(r, c)| {
        replicated(plane, r as isize - pad_top as isize, c as isize - pad_left as isize)
    })
}
