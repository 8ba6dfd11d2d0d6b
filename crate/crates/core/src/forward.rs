//! Patch-wise, channel-wise blur plus additive noise, and synthetic training
//! pair generation.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{chop, plan_grid, GridGeometry};
use crate::image::Image;
use crate::psf::{Kernel, PsfMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation on the `[0, 1]` intensity scale.
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            kind: NoiseKind::None,
            sigma: 0.0,
            seed: 0,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Gaussian,
            sigma,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidRange(format!("noise sigma {}", self.sigma)));
        }
        Ok(())
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NoiseKind::None => write!(f, "none"),
            NoiseKind::Gaussian => write!(f, "gaussian:{}:seed={}", self.sigma, self.seed),
        }
    }
}

/// Parses `none`, `gaussian:SIGMA` or `gaussian:SIGMA:seed=N`.
impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("noise `{s}`; expected none or gaussian:SIGMA[:seed=N]"));
        let mut parts = s.split(':');
        match parts.next() {
            Some("none") if parts.next().is_none() => Ok(NoiseSpec::none()),
            Some("gaussian") => {
                let sigma: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                let seed = match parts.next() {
                    None => 0,
                    Some(p) => p
                        .strip_prefix("seed=")
                        .ok_or_else(bad)?
                        .parse()
                        .map_err(|_| bad())?,
                };
                if parts.next().is_some() {
                    return Err(bad());
                }
                let spec = NoiseSpec::gaussian(sigma, seed);
                spec.validate()?;
                Ok(spec)
            }
            _ => Err(bad()),
        }
    }
}

/// Largest kernel radius in the map; the default patch padding.
pub fn kernel_radius(psf: &PsfMap) -> usize {
    let (kh, kw) = psf.kernel_dims();
    kh.max(kw) / 2
}

pub(crate) fn check_channels(image: &Image, psf: &PsfMap) -> Result<()> {
    let c = image.len_of(Axis(0));
    if c != psf.channels {
        return Err(Error::dims(format!(
            "image has {c} channels, psf map has {}",
            psf.channels
        )));
    }
    Ok(())
}

/// True convolution of the core region of a padded patch.
fn convolve_core(patch: &ArrayView2<'_, f32>, kernel: &Kernel, pad: usize, core_h: usize, core_w: usize) -> Array2<f32> {
    let taps = kernel.taps();
    let (kh, kw) = taps.dim();
    let (ch, cw) = (kh / 2, kw / 2);
    Array2::from_shape_fn((core_h, core_w), |(r, c)| {
        let mut acc = 0.0f64;
        for i in 0..kh {
            let pr = pad + r + ch - i;
            for j in 0..kw {
                acc += taps[[i, j]] as f64 * patch[[pr, pad + c + cw - j]] as f64;
            }
        }
        acc as f32
    })
}

fn blur(x: &Image, psf: &PsfMap, geometry: &GridGeometry) -> Result<Image> {
    let pad = geometry.pad;
    let patches = chop(x, geometry)?;
    let channels = psf.channels;
    let blurred: Vec<Array3<f32>> = patches
        .par_iter()
        .enumerate()
        .map(|(cell, patch)| {
            let core = geometry.cores[cell];
            let (row, col) = (cell / geometry.grid_cols, cell % geometry.grid_cols);
            let mut out = Array3::zeros((channels, core.height, core.width));
            for chn in 0..channels {
                out.index_axis_mut(Axis(0), chn).assign(&convolve_core(
                    &patch.index_axis(Axis(0), chn),
                    psf.kernel(row, col, chn),
                    pad,
                    core.height,
                    core.width,
                ));
            }
            out
        })
        .collect();
    let mut y = Array3::zeros(x.dim());
    for (cell, block) in blurred.into_iter().enumerate() {
        let core = geometry.cores[cell];
        y.slice_mut(s![.., core.top..core.bottom(), core.left..core.right()])
            .assign(&block);
    }
    Ok(y)
}

pub fn add_noise(image: &mut Image, noise: &NoiseSpec) -> Result<()> {
    noise.validate()?;
    if noise.kind == NoiseKind::None || noise.sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::InvalidRange(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    image.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
    Ok(())
}

/// Blurs every patch cell with its own per-channel kernel (context taken from
/// neighboring cells, edges replicated), then adds noise.
pub fn degrade(x: &Image, psf: &PsfMap, noise: &NoiseSpec) -> Result<Image> {
    psf.validate()?;
    check_channels(x, psf)?;
    let (_, h, w) = x.dim();
    let geometry = plan_grid(h, w, psf.grid_rows, psf.grid_cols, kernel_radius(psf))?;
    let mut y = blur(x, psf, &geometry)?;
    add_noise(&mut y, noise)?;
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub degraded: Image,
    pub sharp: Image,
    pub psf: PsfMap,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairSetSpec {
    pub count: usize,
    pub crop: usize,
    pub psf_rows: usize,
    pub psf_cols: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for PairSetSpec {
    fn default() -> Self {
        PairSetSpec {
            count: 1,
            crop: 256,
            psf_rows: 2,
            psf_cols: 2,
            noise: NoiseSpec::none(),
            seed: 0,
        }
    }
}

/// Random crops of the source images, each blurred by a random sub-grid of
/// the PSF map.
pub fn make_pair_set(sources: &[Image], psf: &PsfMap, spec: &PairSetSpec) -> Result<Vec<TrainingPair>> {
    if spec.count == 0 {
        return Ok(Vec::new());
    }
    if sources.is_empty() {
        return Err(Error::SourceTooSmall {
            height: 0,
            width: 0,
            crop: spec.crop,
        });
    }
    for src in sources {
        let (_, h, w) = src.dim();
        if h < spec.crop || w < spec.crop {
            return Err(Error::SourceTooSmall {
                height: h,
                width: w,
                crop: spec.crop,
            });
        }
        check_channels(src, psf)?;
    }
    if spec.psf_rows > psf.grid_rows || spec.psf_cols > psf.grid_cols {
        return Err(Error::InvalidGrid(format!(
            "{}x{} sub-grid from a {}x{} map",
            spec.psf_rows, spec.psf_cols, psf.grid_rows, psf.grid_cols
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let src = &sources[rng.random_range(0..sources.len())];
        let (_, h, w) = src.dim();
        let top = rng.random_range(0..=h - spec.crop);
        let left = rng.random_range(0..=w - spec.crop);
        let pr = rng.random_range(0..=psf.grid_rows - spec.psf_rows);
        let pc = rng.random_range(0..=psf.grid_cols - spec.psf_cols);
        let sharp = src
            .slice(s![.., top..top + spec.crop, left..left + spec.crop])
            .to_owned();
        let sub = psf.sub_grid(pr, pc, spec.psf_rows, spec.psf_cols)?;
        let noise = NoiseSpec {
            seed: spec.noise.seed.wrapping_add(i as u64),
            ..spec.noise
        };
        let degraded = degrade(&sharp, &sub, &noise)?;
        out.push(TrainingPair {
            degraded,
            sharp,
            psf: sub,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psf::{synth_gaussian_map, GaussianMapSpec};

    fn random(shape: (usize, usize, usize), seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.random::<f32>())
    }

    #[test]
    fn delta_kernels_are_identity() {
        let x = random((3, 30, 41), 1);
        let psf = PsfMap::uniform(3, 4, 3, Kernel::delta(7).unwrap()).unwrap();
        assert_eq!(degrade(&x, &psf, &NoiseSpec::none()).unwrap(), x);
    }

    #[test]
    fn box_blur_keeps_constants() {
        let x = Array3::from_elem((1, 20, 20), 0.6f32);
        let k = Kernel::new(Array2::from_elem((5, 5), 1.0 / 25.0)).unwrap();
        let psf = PsfMap::uniform(2, 2, 1, k).unwrap();
        let y = degrade(&x, &psf, &NoiseSpec::none()).unwrap();
        assert!(y.iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn noise_is_seeded() {
        let x = Array3::from_elem((3, 16, 16), 0.5f32);
        let psf = PsfMap::uniform(1, 1, 3, Kernel::delta(3).unwrap()).unwrap();
        let n = NoiseSpec::gaussian(0.01, 1);
        let a = degrade(&x, &psf, &n).unwrap();
        let b = degrade(&x, &psf, &n).unwrap();
        assert_eq!(a, b);
        let c = degrade(&x, &psf, &NoiseSpec::gaussian(0.01, 2)).unwrap();
        assert_ne!(a, c);
        let std = (a.iter().map(|v| ((v - 0.5) as f64).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        assert!((std - 0.01).abs() < 0.002, "{std}");
    }

    #[test]
    fn noise_spec_parsing() {
        assert_eq!("none".parse::<NoiseSpec>().unwrap(), NoiseSpec::none());
        assert_eq!(
            "gaussian:0.01:seed=1".parse::<NoiseSpec>().unwrap(),
            NoiseSpec::gaussian(0.01, 1)
        );
        assert_eq!(
            "gaussian:0.02".parse::<NoiseSpec>().unwrap(),
            NoiseSpec::gaussian(0.02, 0)
        );
        for bad in ["", "poisson", "gaussian", "gaussian:x", "gaussian:-1", "gaussian:0.1:7", "none:1"] {
            assert!(bad.parse::<NoiseSpec>().is_err(), "{bad}");
        }
        let spec = NoiseSpec::gaussian(0.01, 3);
        assert_eq!(spec.to_string().parse::<NoiseSpec>().unwrap(), spec);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = random((1, 16, 16), 2);
        let psf = PsfMap::uniform(1, 1, 3, Kernel::delta(3).unwrap()).unwrap();
        assert!(matches!(
            degrade(&x, &psf, &NoiseSpec::none()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    fn library() -> PsfMap {
        synth_gaussian_map(&GaussianMapSpec {
            rows: 4,
            cols: 4,
            size: 9,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn pair_set_basics() {
        let sources = vec![random((3, 80, 90), 4), random((3, 70, 70), 5)];
        let spec = PairSetSpec {
            count: 3,
            crop: 64,
            noise: NoiseSpec::gaussian(0.01, 9),
            seed: 21,
            ..Default::default()
        };
        let a = make_pair_set(&sources, &library(), &spec).unwrap();
        let b = make_pair_set(&sources, &library(), &spec).unwrap();
        assert_eq!(a.len(), 3);
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.degraded, q.degraded);
            assert_eq!(p.sharp, q.sharp);
            assert_eq!(p.psf, q.psf);
            assert_eq!(p.sharp.dim(), (3, 64, 64));
            assert_eq!((p.psf.grid_rows, p.psf.grid_cols), (2, 2));
        }
        let empty = PairSetSpec { count: 0, ..spec.clone() };
        assert!(make_pair_set(&sources, &library(), &empty).unwrap().is_empty());
        let big = PairSetSpec { crop: 75, ..spec };
        assert!(matches!(
            make_pair_set(&sources, &library(), &big),
            Err(Error::SourceTooSmall { .. })
        ));
    }

    #[test]
    fn quadrants_use_their_own_kernel() {
        // point sources in each quadrant of a 2x2 sub-grid spread differently
        let psf = library().sub_grid(0, 0, 2, 2).unwrap();
        let mut x = Array3::zeros((3, 64, 64));
        for (r, c) in [(16, 16), (16, 48), (48, 16), (48, 48)] {
            x[[0, r, c]] = 1.0;
        }
        let y = degrade(&x, &psf, &NoiseSpec::none()).unwrap();
        for (cell, (r, c)) in [(16usize, 16usize), (16, 48), (48, 16), (48, 48)].into_iter().enumerate() {
            let k = psf.kernel(cell / 2, cell % 2, 0).taps();
            let rad = k.nrows() / 2;
            for i in 0..k.nrows() {
                for j in 0..k.ncols() {
                    // true convolution flips the kernel
                    let v = y[[0, r + rad - i, c + rad - j]];
                    assert!((v - k[[i, j]]).abs() < 1e-7);
                }
            }
        }
    }
}
