//! Half-quadratic splitting over a patch grid.
//!
//! Pre-processing chops the degraded image along the PSF grid and computes
//! every patch spectrum once. Each stage then runs the closed-form z-update
//! per (cell, channel), shaves and assembles the patches into a whole image,
//! and hands it to the projector together with a rasterized λ map.

use std::sync::Arc;

use ndarray::{Array3, Axis};
use rayon::prelude::*;

use crate::deconv::{precompute_spectra_with, z_update, PatchSpectra, PlanCache};
use crate::error::{Error, Result};
use crate::forward::{check_channels, kernel_radius};
use crate::grid::{chop, plan_grid, shave_assemble, GridGeometry};
use crate::hyper::HyperParamMap;
use crate::image::{clamp_unit, ensure_finite, Image};
use crate::projector::{Projector, ProjectorInput};
use crate::psf::PsfMap;

pub const DEFAULT_STAGES: usize = 8;

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub stages: usize,
    /// Patch padding; `None` uses the kernel radius.
    pub pad: Option<usize>,
    pub schedules: HyperParamMap,
    pub projector: Projector,
}

/// Degraded image with its patch spectra, ready for any number of runs with
/// different schedules or projectors.
#[derive(Debug)]
pub struct Prepared {
    geometry: GridGeometry,
    channels: usize,
    /// Indexed `cell * channels + channel`.
    spectra: Vec<PatchSpectra>,
}

impl Prepared {
    pub fn new(y: &Image, psf: &PsfMap, pad: Option<usize>) -> Result<Self> {
        psf.validate()?;
        check_channels(y, psf)?;
        ensure_finite(y, "degraded image")?;
        let (channels, h, w) = y.dim();
        let pad = pad.unwrap_or_else(|| kernel_radius(psf));
        let geometry = plan_grid(h, w, psf.grid_rows, psf.grid_cols, pad)?;
        let (kh, kw) = psf.kernel_dims();
        if let Some(core) = geometry.cores.iter().find(|c| c.height <= kh || c.width <= kw) {
            return Err(Error::dims(format!(
                "core patch {}x{} is not larger than the {kh}x{kw} kernel",
                core.height, core.width
            )));
        }

        let patches = chop(y, &geometry)?;
        let plans = PlanCache::default();
        for cell in 0..geometry.cell_count() {
            let (ph, pw) = geometry.patch_dims(cell);
            plans.get(ph, pw);
        }
        let spectra = (0..geometry.cell_count() * channels)
            .into_par_iter()
            .map(|i| {
                let (cell, ch) = (i / channels, i % channels);
                let (row, col) = (cell / geometry.grid_cols, cell % geometry.grid_cols);
                let (ph, pw) = geometry.patch_dims(cell);
                precompute_spectra_with(
                    plans.get(ph, pw),
                    &patches[cell].index_axis(Axis(0), ch),
                    psf.kernel(row, col, ch),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            geometry,
            channels,
            spectra,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    fn check_schedules(&self, stages: usize, schedules: &HyperParamMap) -> Result<()> {
        schedules.validate()?;
        let g = &self.geometry;
        if schedules.stages < stages || (schedules.rows, schedules.cols, schedules.channels) != (g.grid_rows, g.grid_cols, self.channels) {
            return Err(Error::ConfigIncomplete(format!(
                "schedules are {}x{}x{}x{}, solver needs {}x{}x{}x{}",
                schedules.stages, schedules.rows, schedules.cols, schedules.channels, stages, g.grid_rows, g.grid_cols, self.channels
            )));
        }
        Ok(())
    }

    /// One z-step: per-patch closed-form updates from the previous estimate,
    /// shaved and assembled.
    pub fn z_step(&self, x_prev: &Image, schedules: &HyperParamMap, stage: usize) -> Result<Image> {
        let channels = self.channels;
        let x_patches = chop(x_prev, &self.geometry)?;
        let z_patches = x_patches
            .par_iter()
            .enumerate()
            .map(|(cell, xp)| {
                let mut zp = Array3::zeros(xp.dim());
                for ch in 0..channels {
                    let mu = schedules.mu(stage, cell, ch) as f64;
                    let z = z_update(&self.spectra[cell * channels + ch], &xp.index_axis(Axis(0), ch), mu)?;
                    zp.index_axis_mut(Axis(0), ch).assign(&z);
                }
                Ok(zp)
            })
            .collect::<Result<Vec<_>>>()?;
        shave_assemble(&z_patches, &self.geometry)
    }

    /// Full-resolution λ planes for a stage, constant within each cell.
    pub fn lambda_map(&self, schedules: &HyperParamMap, stage: usize) -> Image {
        self.geometry
            .rasterize(self.channels, |cell, ch| schedules.lambda(stage, cell, ch))
    }

    /// Runs `stages` stages from a zero estimate and returns the unclamped
    /// final `x`. `observe` sees `(stage, z, x)` after every stage.
    pub fn run(
        &self,
        stages: usize,
        schedules: &HyperParamMap,
        projector: &Projector,
        mut observe: impl FnMut(usize, &Image, &Image),
    ) -> Result<Image> {
        if stages == 0 {
            return Err(Error::ConfigIncomplete("at least one stage is required".into()));
        }
        self.check_schedules(stages, schedules)?;
        let g = &self.geometry;
        let mut x = Array3::zeros((self.channels, g.image_h, g.image_w));
        for stage in 0..stages {
            let z = self.z_step(&x, schedules, stage)?;
            let input = ProjectorInput::new(z, self.lambda_map(schedules, stage))?;
            x = projector.project(&input)?;
            observe(stage, &input.z, &x);
        }
        Ok(x)
    }

    /// [`Prepared::run`] followed by clamping to `[0, 1]`.
    pub fn solve(&self, stages: usize, schedules: &HyperParamMap, projector: &Projector) -> Result<Image> {
        let mut x = self.run(stages, schedules, projector, |_, _, _| {})?;
        clamp_unit(&mut x);
        Ok(x)
    }
}

pub fn solve(y: &Image, psf: &PsfMap, config: &SolverConfig) -> Result<Image> {
    config.schedules.check_covers(config.stages, psf)?;
    Prepared::new(y, psf, config.pad)?.solve(config.stages, &config.schedules, &config.projector)
}

impl SolverConfig {
    pub fn new(stages: usize, schedules: HyperParamMap, projector: Projector) -> Self {
        SolverConfig {
            stages,
            pad: None,
            schedules,
            projector,
        }
    }

    pub fn with_cnn(stages: usize, schedules: HyperParamMap, weights: Arc<crate::projector::CnnWeights>) -> Self {
        SolverConfig::new(stages, schedules, Projector::Cnn(weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyper::default_schedules;
    use crate::psf::Kernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize), seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.random::<f32>())
    }

    #[test]
    fn delta_identity_recovers_input() {
        let y = random((3, 40, 48), 1);
        let psf = PsfMap::uniform(2, 3, 3, Kernel::delta(5).unwrap()).unwrap();
        let mut schedules = default_schedules(1, &psf).unwrap();
        schedules.mu.iter_mut().for_each(|m| *m = 1e-6);
        let x = solve(&y, &psf, &SolverConfig::new(1, schedules, Projector::Identity)).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn incomplete_schedules_rejected() {
        let y = random((3, 40, 40), 2);
        let psf = PsfMap::uniform(2, 2, 3, Kernel::delta(5).unwrap()).unwrap();
        let schedules = default_schedules(2, &psf).unwrap();
        let err = solve(&y, &psf, &SolverConfig::new(3, schedules, Projector::Identity)).unwrap_err();
        assert!(matches!(err, Error::ConfigIncomplete(_)));
    }

    #[test]
    fn cells_must_exceed_kernel() {
        let y = random((3, 20, 20), 3);
        let psf = PsfMap::uniform(2, 2, 3, Kernel::delta(11).unwrap()).unwrap();
        assert!(matches!(Prepared::new(&y, &psf, None), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn output_is_clamped() {
        let mut y = random((1, 30, 30), 4);
        y[[0, 3, 3]] = 4.0;
        y[[0, 9, 9]] = -2.0;
        let psf = PsfMap::uniform(1, 1, 1, Kernel::delta(3).unwrap()).unwrap();
        let s = default_schedules(2, &psf).unwrap();
        let x = solve(&y, &psf, &SolverConfig::new(2, s, Projector::Identity)).unwrap();
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
