//! Patch geometry: chopping an image into a grid of non-overlapping core
//! regions, padding each with context from its neighbors, and reassembling.

use ndarray::{s, Array3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{replicated, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridGeometry {
    pub image_h: usize,
    pub image_w: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub pad: usize,
    /// Core rectangle per cell, row-major.
    pub cores: Vec<Rect>,
    /// Core expanded by `pad` and clipped to the image, row-major.
    pub padded: Vec<Rect>,
}

/// Splits `len` into `parts` contiguous runs whose lengths differ by at most
/// one, longer runs first. Returns `(start, length)` pairs.
fn balanced_split(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let n = base + usize::from(i < extra);
            let run = (start, n);
            start += n;
            run
        })
        .collect()
}

pub fn plan_grid(image_h: usize, image_w: usize, grid_rows: usize, grid_cols: usize, pad: usize) -> Result<GridGeometry> {
    if grid_rows == 0 || grid_cols == 0 || grid_rows > image_h || grid_cols > image_w {
        return Err(Error::InvalidGrid(format!(
            "{grid_rows}x{grid_cols} grid on a {image_h}x{image_w} image leaves empty cells"
        )));
    }
    let rows = balanced_split(image_h, grid_rows);
    let cols = balanced_split(image_w, grid_cols);

    let mut cores = Vec::with_capacity(grid_rows * grid_cols);
    let mut padded = Vec::with_capacity(grid_rows * grid_cols);
    for &(top, height) in &rows {
        for &(left, width) in &cols {
            cores.push(Rect {
                top,
                left,
                height,
                width,
            });
            let t = top.saturating_sub(pad);
            let l = left.saturating_sub(pad);
            let b = (top + height + pad).min(image_h);
            let r = (left + width + pad).min(image_w);
            padded.push(Rect {
                top: t,
                left: l,
                height: b - t,
                width: r - l,
            });
        }
    }
    Ok(GridGeometry {
        image_h,
        image_w,
        grid_rows,
        grid_cols,
        pad,
        cores,
        padded,
    })
}

impl GridGeometry {
    pub fn cell_count(&self) -> usize {
        self.cores.len()
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.grid_cols + col
    }

    /// Dimensions of the padded patch for a cell, including replicated border.
    pub fn patch_dims(&self, cell: usize) -> (usize, usize) {
        let core = self.cores[cell];
        (core.height + 2 * self.pad, core.width + 2 * self.pad)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let (_, h, w) = image.dim();
        if (h, w) != (self.image_h, self.image_w) {
            return Err(Error::dims(format!(
                "image is {h}x{w}, geometry expects {}x{}",
                self.image_h, self.image_w
            )));
        }
        Ok(())
    }

    /// Builds a full-resolution image whose pixels carry a per-cell,
    /// per-channel value.
    pub fn rasterize(&self, channels: usize, value: impl Fn(usize, usize) -> f32) -> Image {
        let mut out = Array3::zeros((channels, self.image_h, self.image_w));
        for (cell, core) in self.cores.iter().enumerate() {
            for ch in 0..channels {
                out.slice_mut(s![ch, core.top..core.bottom(), core.left..core.right()])
                    .fill(value(cell, ch));
            }
        }
        out
    }
}

fn chop_cell(image: &Image, geometry: &GridGeometry, cell: usize) -> Image {
    let core = geometry.cores[cell];
    let pad = geometry.pad as isize;
    let (ph, pw) = geometry.patch_dims(cell);
    let channels = image.len_of(Axis(0));
    let mut patch = Array3::zeros((channels, ph, pw));
    for ch in 0..channels {
        let plane = image.index_axis(Axis(0), ch);
        let mut out = patch.index_axis_mut(Axis(0), ch);
        for ((r, c), v) in out.indexed_iter_mut() {
            *v = replicated(
                &plane,
                core.top as isize - pad + r as isize,
                core.left as isize - pad + c as isize,
            );
        }
    }
    patch
}

/// Cuts one padded patch per cell (row-major). Context outside the image is
/// filled by replicating the nearest edge pixel.
pub fn chop(image: &Image, geometry: &GridGeometry) -> Result<Vec<Image>> {
    geometry.check_image(image)?;
    Ok((0..geometry.cell_count())
        .into_par_iter()
        .map(|cell| chop_cell(image, geometry, cell))
        .collect())
}

/// Crops each patch back to its core and writes it into place.
pub fn shave_assemble(patches: &[Image], geometry: &GridGeometry) -> Result<Image> {
    if patches.len() != geometry.cell_count() {
        return Err(Error::dims(format!(
            "{} patches for {} cells",
            patches.len(),
            geometry.cell_count()
        )));
    }
    let channels = patches.first().map(|p| p.len_of(Axis(0))).unwrap_or(0);
    let pad = geometry.pad;
    let mut out = Array3::zeros((channels, geometry.image_h, geometry.image_w));
    for (cell, patch) in patches.iter().enumerate() {
        let (ph, pw) = geometry.patch_dims(cell);
        if patch.dim() != (channels, ph, pw) {
            return Err(Error::dims(format!(
                "patch {cell} is {:?}, expected {:?}",
                patch.dim(),
                (channels, ph, pw)
            )));
        }
        let core = geometry.cores[cell];
        out.slice_mut(s![.., core.top..core.bottom(), core.left..core.right()])
            .assign(&patch.slice(s![.., pad..pad + core.height, pad..pad + core.width]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(channels: usize, h: usize, w: usize) -> Image {
        Array3::from_shape_fn((channels, h, w), |(c, r, k)| (c * 10_000 + r * 100 + k) as f32)
    }

    #[test]
    fn paper_scale_grid_gives_128_cells() {
        let g = plan_grid(768, 1024, 6, 8, 12).unwrap();
        assert_eq!(g.cell_count(), 48);
        assert!(g.cores.iter().all(|r| r.height == 128 && r.width == 128));
    }

    #[test]
    fn single_cell_covers_image() {
        let g = plan_grid(37, 21, 1, 1, 0).unwrap();
        assert_eq!(
            g.cores,
            vec![Rect {
                top: 0,
                left: 0,
                height: 37,
                width: 21
            }]
        );
        let img = ramp(3, 37, 21);
        let patches = chop(&img, &g).unwrap();
        assert_eq!(patches[0], img);
    }

    #[test]
    fn balanced_partition_matches_enumeration() {
        // every split of 10 into 3 runs differing by <= 1, sorted descending
        let mut candidates = Vec::new();
        for a in 1..=8usize {
            for b in 1..=8usize {
                let c = 10usize.saturating_sub(a + b);
                if a + b + c == 10 && c >= 1 {
                    let v = [a, b, c];
                    let max = *v.iter().max().unwrap();
                    let min = *v.iter().min().unwrap();
                    if max - min <= 1 && a >= b && b >= c {
                        candidates.push(v);
                    }
                }
            }
        }
        assert_eq!(candidates, vec![[4, 3, 3]]);
        let g = plan_grid(10, 10, 3, 3, 0).unwrap();
        let heights: Vec<_> = (0..3).map(|r| g.cores[g.cell_index(r, 0)].height).collect();
        let widths: Vec<_> = (0..3).map(|c| g.cores[g.cell_index(0, c)].width).collect();
        assert_eq!(heights, vec![4, 3, 3]);
        assert_eq!(widths, vec![4, 3, 3]);
    }

    #[test]
    fn empty_cells_rejected() {
        assert!(matches!(plan_grid(4, 10, 5, 2, 0), Err(Error::InvalidGrid(_))));
        assert!(matches!(plan_grid(4, 10, 0, 2, 0), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn padded_rects_are_clipped() {
        let g = plan_grid(40, 40, 2, 2, 12).unwrap();
        assert_eq!(
            g.padded[0],
            Rect {
                top: 0,
                left: 0,
                height: 32,
                width: 32
            }
        );
        assert_eq!(
            g.padded[3],
            Rect {
                top: 8,
                left: 8,
                height: 32,
                width: 32
            }
        );
    }

    #[test]
    fn interior_patch_is_offset_crop() {
        let img = ramp(2, 60, 60);
        let g = plan_grid(60, 60, 3, 3, 12).unwrap();
        let patches = chop(&img, &g).unwrap();
        let center = &patches[g.cell_index(1, 1)];
        let core = g.cores[g.cell_index(1, 1)];
        assert_eq!(center.dim(), (2, 20 + 24, 20 + 24));
        for ((ch, r, c), v) in center.indexed_iter() {
            assert_eq!(*v, img[[ch, core.top + r - 12, core.left + c - 12]]);
        }
    }

    #[test]
    fn corner_patch_replicates_edges() {
        let img = ramp(1, 16, 16);
        let g = plan_grid(16, 16, 2, 2, 4).unwrap();
        let p = &chop(&img, &g).unwrap()[0];
        for r in 0..4 {
            for c in 0..p.dim().2 {
                let src_c = (c as isize - 4).clamp(0, 15) as usize;
                assert_eq!(p[[0, r, c]], img[[0, 0, src_c]]);
            }
        }
        for c in 0..4 {
            for r in 4..p.dim().1 {
                assert_eq!(p[[0, r, c]], img[[0, r - 4, 0]]);
            }
        }
    }

    #[test]
    fn constant_patches_tile_the_image() {
        let g = plan_grid(11, 13, 3, 4, 2).unwrap();
        let patches: Vec<Image> = (0..g.cell_count())
            .map(|cell| {
                let (h, w) = g.patch_dims(cell);
                Array3::from_elem((1, h, w), cell as f32)
            })
            .collect();
        let img = shave_assemble(&patches, &g).unwrap();
        for (cell, core) in g.cores.iter().enumerate() {
            for r in core.top..core.bottom() {
                for c in core.left..core.right() {
                    assert_eq!(img[[0, r, c]], cell as f32);
                }
            }
        }
        let zeros: Vec<Image> = patches.iter().map(|p| Array3::zeros(p.dim())).collect();
        assert!(shave_assemble(&zeros, &g).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let g = plan_grid(20, 20, 2, 2, 3).unwrap();
        assert!(matches!(
            chop(&ramp(1, 20, 21), &g),
            Err(Error::DimensionMismatch(_))
        ));
        let mut patches = chop(&ramp(1, 20, 20), &g).unwrap();
        patches.pop();
        assert!(matches!(
            shave_assemble(&patches, &g),
            Err(Error::DimensionMismatch(_))
        ));
        let mut patches = chop(&ramp(1, 20, 20), &g).unwrap();
        patches[1] = Array3::zeros((1, 5, 5));
        assert!(matches!(
            shave_assemble(&patches, &g),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
