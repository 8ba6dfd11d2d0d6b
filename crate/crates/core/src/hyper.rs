//! Per-stage, per-cell, per-channel penalty weights μ and prior strengths λ.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::psf::{ByteReader, PsfMap};

const HPMV_MAGIC: &[u8; 4] = b"HPMV";
const HPMV_VERSION: u32 = 1;

/// μ and λ stored stage-major: `[stage][row][col][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParamMap {
    pub stages: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub mu: Vec<f32>,
    pub lambda: Vec<f32>,
}

/// Endpoints of the log-spaced default schedules.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleSpec {
    pub mu_first: f64,
    pub mu_last: f64,
    pub lambda_first: f64,
    pub lambda_last: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            mu_first: 1e-2,
            mu_last: 1.0,
            lambda_first: 5e-2,
            lambda_last: 5e-3,
        }
    }
}

fn log_space(first: f64, last: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![first];
    }
    let (a, b) = (first.ln(), last.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Spatially uniform schedules that vary only across stages.
pub fn default_schedules(stages: usize, psf: &PsfMap) -> Result<HyperParamMap> {
    schedules_from(stages, psf, &ScheduleSpec::default())
}

pub fn schedules_from(stages: usize, psf: &PsfMap, spec: &ScheduleSpec) -> Result<HyperParamMap> {
    if stages == 0 {
        return Err(Error::ConfigIncomplete("at least one stage is required".into()));
    }
    let mus = log_space(spec.mu_first, spec.mu_last, stages);
    let lambdas = log_space(spec.lambda_first, spec.lambda_last, stages);
    let per_stage = psf.grid_rows * psf.grid_cols * psf.channels;
    let expand = |v: &[f64]| -> Vec<f32> {
        v.iter()
            .flat_map(|&x| std::iter::repeat_n(x as f32, per_stage))
            .collect()
    };
    let map = HyperParamMap {
        stages,
        rows: psf.grid_rows,
        cols: psf.grid_cols,
        channels: psf.channels,
        mu: expand(&mus),
        lambda: expand(&lambdas),
    };
    map.validate()?;
    Ok(map)
}

impl HyperParamMap {
    pub fn len(&self) -> usize {
        self.stages * self.rows * self.cols * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, stage: usize, cell: usize, channel: usize) -> usize {
        (stage * self.rows * self.cols + cell) * self.channels + channel
    }

    pub fn mu(&self, stage: usize, cell: usize, channel: usize) -> f32 {
        self.mu[self.index(stage, cell, channel)]
    }

    pub fn lambda(&self, stage: usize, cell: usize, channel: usize) -> f32 {
        self.lambda[self.index(stage, cell, channel)]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 || self.mu.len() != n || self.lambda.len() != n {
            return Err(Error::ConfigIncomplete(format!(
                "map of {}x{}x{}x{} holds {} mu and {} lambda values",
                self.stages,
                self.rows,
                self.cols,
                self.channels,
                self.mu.len(),
                self.lambda.len()
            )));
        }
        if !self
            .mu
            .iter()
            .chain(&self.lambda)
            .all(|v| v.is_finite() && *v > 0.0)
        {
            return Err(Error::InvalidRange("mu and lambda entries must be positive and finite".into()));
        }
        Ok(())
    }

    /// Confirms the map covers every (stage, cell, channel) triple.
    pub fn check_covers(&self, stages: usize, psf: &PsfMap) -> Result<()> {
        self.validate()?;
        if (self.stages, self.rows, self.cols, self.channels) != (stages, psf.grid_rows, psf.grid_cols, psf.channels) {
            return Err(Error::ConfigIncomplete(format!(
                "schedules are {}x{}x{}x{}, solver needs {}x{}x{}x{}",
                self.stages,
                self.rows,
                self.cols,
                self.channels,
                stages,
                psf.grid_rows,
                psf.grid_cols,
                psf.channels
            )));
        }
        Ok(())
    }
}

pub fn encode_hyper_map(map: &HyperParamMap) -> Result<Vec<u8>> {
    map.validate()?;
    let mut out = Vec::with_capacity(24 + 8 * map.len());
    out.extend_from_slice(HPMV_MAGIC);
    for v in [HPMV_VERSION, map.stages as u32, map.rows as u32, map.cols as u32, map.channels as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in map.mu.iter().chain(&map.lambda) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_hyper_map(bytes: &[u8]) -> Result<HyperParamMap> {
    let mut rd = ByteReader::new(bytes);
    rd.expect_magic(HPMV_MAGIC)?;
    let at = rd.offset();
    let version = rd.u32("version")?;
    if version != HPMV_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let at = rd.offset();
    let stages = rd.u32("stages")? as usize;
    let rows = rd.u32("rows")? as usize;
    let cols = rd.u32("cols")? as usize;
    let channels = rd.u32("channels")? as usize;
    let n = [stages, rows, cols, channels]
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(at, "map size overflows"))?;
    if n == 0 {
        return Err(Error::format(at, "empty map"));
    }
    let mu = rd.f32s(n, "mu block")?;
    let lambda = rd.f32s(n, "lambda block")?;
    rd.expect_end()?;
    let map = HyperParamMap {
        stages,
        rows,
        cols,
        channels,
        mu,
        lambda,
    };
    map.validate()?;
    Ok(map)
}

pub fn save_hyper_map(map: &HyperParamMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_hyper_map(map)?)?;
    Ok(())
}

pub fn load_hyper_map(path: impl AsRef<Path>) -> Result<HyperParamMap> {
    decode_hyper_map(&fs::read(path)?)
}
