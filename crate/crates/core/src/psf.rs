//! Spatially-varying point-spread functions.
//!
//! A [`PsfMap`] holds one blur kernel per grid cell and color channel. Kernels
//! are stored as `f32` taps and are always normalized to unit sum once they are
//! part of a map.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tolerance on `|sum - 1|` for a kernel to count as normalized.
pub const NORMALIZED_TOLERANCE: f64 = 1e-6;

/// Kernel size used throughout unless configured otherwise.
pub const DEFAULT_KERNEL_SIZE: usize = 25;

const PSFM_MAGIC: &[u8; 4] = b"PSFM";
const PSFM_VERSION: u32 = 1;

/// A 2-D blur kernel with odd height and width.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    taps: Array2<f32>,
}

impl Kernel {
    pub fn new(taps: Array2<f32>) -> Result<Self> {
        let (h, w) = taps.dim();
        if h % 2 == 0 || w % 2 == 0 {
            return Err(Error::dims(format!("kernel must have odd dims, got {h}x{w}")));
        }
        Ok(Kernel { taps })
    }

    /// Unit impulse of the given odd size.
    pub fn delta(size: usize) -> Result<Self> {
        let mut taps = Array2::zeros((size, size));
        if size % 2 == 1 {
            taps[[size / 2, size / 2]] = 1.0;
        }
        Kernel::new(taps)
    }

    /// Kernel supplied from outside (a file, a user array). Its taps must sum
    /// to within `[0.9, 1.1]`; it is then normalized to unit sum.
    pub fn from_external(taps: Array2<f32>) -> Result<Self> {
        let kernel = Kernel::new(taps)?;
        let sum = kernel.sum();
        if !sum.is_finite() || !(0.9..=1.1).contains(&sum) {
            return Err(Error::KernelSum(sum));
        }
        kernel.normalized()
    }

    pub fn height(&self) -> usize {
        self.taps.nrows()
    }

    pub fn width(&self) -> usize {
        self.taps.ncols()
    }

    pub fn taps(&self) -> &Array2<f32> {
        &self.taps
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().map(|&t| t as f64).sum()
    }

    pub fn is_normalized(&self) -> bool {
        (self.sum() - 1.0).abs() < NORMALIZED_TOLERANCE
    }

    /// Divides every tap by the tap sum.
    pub fn normalized(&self) -> Result<Self> {
        let sum = self.sum();
        if sum == 0.0 {
            return Err(Error::ZeroSum);
        }
        if !sum.is_finite() {
            return Err(Error::NonFinite("kernel taps".into()));
        }
        Ok(Kernel {
            taps: self.taps.mapv(|t| (t as f64 / sum) as f32),
        })
    }
}

/// Parameters of a rotated anisotropic Gaussian kernel.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GaussianSpec {
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Rotation of the `sigma_x` axis from the image x axis, radians.
    pub theta: f64,
    pub size: usize,
}

impl GaussianSpec {
    pub fn isotropic(sigma: f64, size: usize) -> Self {
        GaussianSpec {
            sigma_x: sigma,
            sigma_y: sigma,
            theta: 0.0,
            size,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.size < 3 || self.size.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "size must be odd and at least 3, got {}",
                self.size
            )));
        }
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0) || !self.theta.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "sigmas must be positive, got ({}, {})",
                self.sigma_x, self.sigma_y
            )));
        }
        Ok(())
    }
}

/// Samples the Gaussian density at tap centers and normalizes to unit sum.
pub fn synth_gaussian(spec: &GaussianSpec) -> Result<Kernel> {
    spec.validate()?;
    let n = spec.size;
    let center = (n / 2) as f64;
    let (sin, cos) = spec.theta.sin_cos();
    let ax = 1.0 / (2.0 * spec.sigma_x * spec.sigma_x);
    let ay = 1.0 / (2.0 * spec.sigma_y * spec.sigma_y);

    let density = Array2::from_shape_fn((n, n), |(r, c)| {
        let dx = c as f64 - center;
        let dy = r as f64 - center;
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        (-(u * u * ax + v * v * ay)).exp()
    });
    let sum: f64 = density.sum();
    Kernel::new(density.mapv(|d| (d / sum) as f32))
}

/// Recipe for a random grid of Gaussian kernels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GaussianMapSpec {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub size: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
}

impl Default for GaussianMapSpec {
    fn default() -> Self {
        GaussianMapSpec {
            rows: 16,
            cols: 16,
            channels: 3,
            size: DEFAULT_KERNEL_SIZE,
            sigma_min: 1.0,
            sigma_max: 3.0,
            seed: 0,
        }
    }
}

/// Per-channel sigma jitter, as a fraction of the cell's base sigma.
const CHROMATIC_JITTER: f64 = 0.15;

/// Draws a deterministic map of anisotropic Gaussian kernels.
///
/// Each cell draws base sigmas and an orientation; every channel then jitters
/// the sigmas independently (clamped back into the range) so the channels
/// blur differently.
pub fn synth_gaussian_map(spec: &GaussianMapSpec) -> Result<PsfMap> {
    let (lo, hi) = (spec.sigma_min, spec.sigma_max);
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::InvalidRange(format!("sigma range [{lo}, {hi}]")));
    }
    if lo <= 0.0 {
        return Err(Error::InvalidRange(format!("sigmas must be positive, got [{lo}, {hi}]")));
    }
    if spec.rows == 0 || spec.cols == 0 {
        return Err(Error::InvalidGrid(format!("{}x{} grid", spec.rows, spec.cols)));
    }
    check_channels(spec.channels)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |lo: f64, hi: f64| if lo < hi { rng.random_range(lo..hi) } else { lo };

    let mut kernels = Vec::with_capacity(spec.rows * spec.cols * spec.channels);
    for _ in 0..spec.rows * spec.cols {
        let sx = draw(lo, hi);
        let sy = draw(lo, hi);
        let theta = draw(0.0, PI);
        for _ in 0..spec.channels {
            let jx = 1.0 + draw(-CHROMATIC_JITTER, CHROMATIC_JITTER);
            let jy = 1.0 + draw(-CHROMATIC_JITTER, CHROMATIC_JITTER);
            kernels.push(synth_gaussian(&GaussianSpec {
                sigma_x: (sx * jx).clamp(lo, hi),
                sigma_y: (sy * jy).clamp(lo, hi),
                theta,
                size: spec.size,
            })?);
        }
    }
    PsfMap::new(spec.rows, spec.cols, spec.channels, kernels)
}

/// Grid of per-cell, per-channel kernels, stored cell-major
/// (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct PsfMap {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub channels: usize,
    pub kernels: Vec<Kernel>,
}

fn check_channels(channels: usize) -> Result<()> {
    if channels == 1 || channels == 3 {
        Ok(())
    } else {
        Err(Error::dims(format!("channels must be 1 or 3, got {channels}")))
    }
}

impl PsfMap {
    pub fn new(grid_rows: usize, grid_cols: usize, channels: usize, kernels: Vec<Kernel>) -> Result<Self> {
        let map = PsfMap {
            grid_rows,
            grid_cols,
            channels,
            kernels,
        };
        map.validate()?;
        Ok(map)
    }

    /// Same kernel in every cell and channel.
    pub fn uniform(grid_rows: usize, grid_cols: usize, channels: usize, kernel: Kernel) -> Result<Self> {
        let kernel = kernel.normalized()?;
        PsfMap::new(
            grid_rows,
            grid_cols,
            channels,
            vec![kernel; grid_rows * grid_cols * channels],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::InvalidGrid(format!(
                "{}x{} psf grid",
                self.grid_rows, self.grid_cols
            )));
        }
        check_channels(self.channels)?;
        let expected = self.grid_rows * self.grid_cols * self.channels;
        if self.kernels.len() != expected {
            return Err(Error::dims(format!(
                "expected {expected} kernels, found {}",
                self.kernels.len()
            )));
        }
        let (kh, kw) = self.kernel_dims();
        for (i, k) in self.kernels.iter().enumerate() {
            if (k.height(), k.width()) != (kh, kw) {
                return Err(Error::dims(format!(
                    "kernel {i} is {}x{}, map uses {kh}x{kw}",
                    k.height(),
                    k.width()
                )));
            }
            if !k.is_normalized() {
                return Err(Error::dims(format!("kernel {i} sums to {}, not 1", k.sum())));
            }
        }
        Ok(())
    }

    pub fn kernel_dims(&self) -> (usize, usize) {
        self.kernels
            .first()
            .map(|k| (k.height(), k.width()))
            .unwrap_or((0, 0))
    }

    pub fn kernel(&self, row: usize, col: usize, channel: usize) -> &Kernel {
        &self.kernels[(row * self.grid_cols + col) * self.channels + channel]
    }

    pub fn cell_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Copies the `rows`×`cols` block of cells starting at (`row0`, `col0`).
    pub fn sub_grid(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<PsfMap> {
        if rows == 0 || cols == 0 || row0 + rows > self.grid_rows || col0 + cols > self.grid_cols {
            return Err(Error::InvalidGrid(format!(
                "sub-grid {rows}x{cols} at ({row0}, {col0}) outside {}x{} map",
                self.grid_rows, self.grid_cols
            )));
        }
        let mut kernels = Vec::with_capacity(rows * cols * self.channels);
        for r in row0..row0 + rows {
            for c in col0..col0 + cols {
                for ch in 0..self.channels {
                    kernels.push(self.kernel(r, c, ch).clone());
                }
            }
        }
        PsfMap::new(rows, cols, self.channels, kernels)
    }
}

/// Encodes a map in the PSFM little-endian layout.
pub fn encode_psf_map(map: &PsfMap) -> Result<Vec<u8>> {
    map.validate()?;
    let (kh, kw) = map.kernel_dims();
    let mut out = Vec::with_capacity(28 + map.kernels.len() * kh * kw * 4);
    out.extend_from_slice(PSFM_MAGIC);
    for v in [
        PSFM_VERSION,
        map.grid_rows as u32,
        map.grid_cols as u32,
        map.channels as u32,
        kh as u32,
        kw as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for k in &map.kernels {
        for &t in k.taps().iter() {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_psf_map(map: &PsfMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_psf_map(map)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_psf_map(path: impl AsRef<Path>) -> Result<PsfMap> {
    decode_psf_map(&fs::read(path)?)
}

/// Little-endian reader that reports byte offsets in its errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.offset(),
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.offset(), format!("{what} length overflows")))?;
        let b = self.take(len, what)?;
        Ok(b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode_psf_map(bytes: &[u8]) -> Result<PsfMap> {
    let mut rd = ByteReader::new(bytes);
    rd.expect_magic(PSFM_MAGIC)?;
    let at = rd.offset();
    let version = rd.u32("version")?;
    if version != PSFM_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let at = rd.offset();
    let rows = rd.u32("grid_rows")? as usize;
    let cols = rd.u32("grid_cols")? as usize;
    let channels = rd.u32("channels")? as usize;
    let kh = rd.u32("kernel_h")? as usize;
    let kw = rd.u32("kernel_w")? as usize;
    if rows == 0 || cols == 0 || kh == 0 || kw == 0 {
        return Err(Error::format(at, format!("empty dims {rows}x{cols} grid, {kh}x{kw} kernel")));
    }
    check_channels(channels)?;
    if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(Error::dims(format!("kernel must have odd dims, got {kh}x{kw}")));
    }
    let count = [rows, cols, channels, kh, kw]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(at, "tap count overflows"))?;
    let taps = rd.f32s(count, "kernel taps")?;
    rd.expect_end()?;

    let kernels = taps
        .chunks_exact(kh * kw)
        .map(|chunk| {
            let taps = Array2::from_shape_vec((kh, kw), chunk.to_vec()).expect("chunk length");
            let kernel = Kernel::new(taps)?;
            if kernel.is_normalized() {
                Ok(kernel)
            } else {
                Kernel::from_external(kernel.taps)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    PsfMap::new(rows, cols, channels, kernels)
}
