//! PSNR, SSIM and the benchmark harness.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::grid::GridGeometry;
use crate::image::{ensure_same_dims, Image};
use crate::psf::PsfMap;
use crate::solver::{solve, SolverConfig};

/// Reported PSNR for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_dims(a, b)?;
    let n = a.len().max(1) as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n)
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < peak * peak * 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// `10·log10(peak²/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// PSNR restricted to each grid cell's core region, row-major.
pub fn per_cell_psnr(a: &Image, b: &Image, geometry: &GridGeometry, peak: f64) -> Result<Vec<f64>> {
    ensure_same_dims(a, b)?;
    Ok(geometry
        .cores
        .iter()
        .map(|core| {
            let sl = ndarray::s![.., core.top..core.bottom(), core.left..core.right()];
            let (pa, pb) = (a.slice(sl), b.slice(sl));
            let n = pa.len().max(1) as f64;
            let m = pa
                .iter()
                .zip(pb.iter())
                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                .sum::<f64>()
                / n;
            psnr_from_mse(m, peak)
        })
        .collect())
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the normalized Gaussian window.
fn filter_valid(x: &Array2<f64>, win: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = win.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let rows = Array2::from_shape_fn((h, ow), |(r, c)| (0..n).map(|k| win[k] * x[[r, c + k]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(r, c)| (0..n).map(|k| win[k] * rows[[r + k, c]]).sum::<f64>())
}

fn ssim_plane(a: &ArrayView2<'_, f32>, b: &ArrayView2<'_, f32>) -> f64 {
    let win = gaussian_window();
    let a = a.mapv(f64::from);
    let b = b.mapv(f64::from);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(&a, &win);
    let mu_b = filter_valid(&b, &win);
    let aa = filter_valid(&(&a * &a), &win);
    let bb = filter_valid(&(&b * &b), &win);
    let ab = filter_valid(&(&a * &b), &win);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean SSIM over 11×11 Gaussian windows (σ = 1.5, peak 1), averaged across
/// channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_dims(a, b)?;
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let sum: f64 = (0..c)
        .map(|ch| ssim_plane(&a.index_axis(Axis(0), ch), &b.index_axis(Axis(0), ch)))
        .sum();
    Ok(sum / c as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub scene: String,
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_patch_psnr: Option<Vec<f64>>,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub degraded: Image,
    pub sharp: Image,
}

/// Restores every scene and scores it against its ground truth.
pub fn benchmark(scenes: &[Scene], psf: &PsfMap, config: &SolverConfig) -> Result<Vec<MetricReport>> {
    scenes
        .iter()
        .map(|scene| {
            let start = Instant::now();
            let restored = solve(&scene.degraded, psf, config)?;
            let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
            let (_, h, w) = restored.dim();
            let geometry = crate::grid::plan_grid(h, w, psf.grid_rows, psf.grid_cols, 0)?;
            Ok(MetricReport {
                scene: scene.name.clone(),
                psnr_db: psnr(&restored, &scene.sharp, 1.0)?,
                ssim: ssim(&restored, &scene.sharp)?,
                per_patch_psnr: Some(per_cell_psnr(&restored, &scene.sharp, &geometry, 1.0)?),
                wall_time_ms,
            })
        })
        .collect()
}

/// `scene,psnr_db,ssim,wall_time_ms` table.
pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("scene,psnr_db,ssim,wall_time_ms\n");
    for r in reports {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.3}", r.scene, r.psnr_db, r.ssim, r.wall_time_ms);
    }
    out
}

pub fn reports_to_json(reports: &[MetricReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn identical_images_hit_the_cap() {
        let a = Array3::from_elem((3, 16, 16), 0.3f32);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn uniform_offset_is_twenty_db() {
        let a = Array3::zeros((3, 12, 12));
        let b = Array3::from_elem((3, 12, 12), 0.1f32);
        let db = psnr(&a, &b, 1.0).unwrap();
        assert!((db - 20.0).abs() < 1e-6, "{db}");
        assert_eq!(db, psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_requires_window_sized_images() {
        let a = Array3::zeros((1, 10, 30));
        assert!(matches!(ssim(&a, &a), Err(Error::ImageTooSmall { .. })));
        let b = Array3::zeros((1, 11, 11));
        assert!(ssim(&b, &Array3::zeros((1, 11, 12))).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = reports_to_csv(&[MetricReport {
            scene: "a".into(),
            psnr_db: 30.5,
            ssim: 0.9,
            per_patch_psnr: None,
            wall_time_ms: 12.0,
        }]);
        assert_eq!(csv, "scene,psnr_db,ssim,wall_time_ms\na,30.500000,0.900000,12.000\n");
    }

    #[test]
    fn empty_benchmark() {
        let psf = PsfMap::uniform(1, 1, 3, crate::psf::Kernel::delta(3).unwrap()).unwrap();
        let cfg = SolverConfig::new(
            1,
            crate::hyper::default_schedules(1, &psf).unwrap(),
            crate::projector::Projector::Identity,
        );
        assert!(benchmark(&[], &psf, &cfg).unwrap().is_empty());
        assert_eq!(reports_to_csv(&[]), "scene,psnr_db,ssim,wall_time_ms\n");
    }
}
