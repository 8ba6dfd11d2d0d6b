//! Lens-specific refinement of the μ/λ map by derivative-free coordinate
//! descent in log space.
//!
//! Coordinates are grouped per grid cell: one coordinate scales μ for every
//! stage and channel of a cell, another does the same for λ. Each visit tries
//! `×step` and `÷step` and keeps the better candidate if it strictly improves
//! the mean objective over the calibration pairs. A sweep that accepts
//! nothing halves the log-step; `patience` consecutive barren sweeps end the
//! search.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hyper::HyperParamMap;
use crate::image::{ensure_same_dims, Image};
use crate::metrics::{psnr, PSNR_CAP_DB};
use crate::projector::Projector;
use crate::psf::PsfMap;
use crate::solver::Prepared;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Mean PSNR in dB (capped at 100).
    Psnr,
    /// Negative mean absolute error.
    L1,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefineConfig {
    pub max_iters: usize,
    pub step_factor: f64,
    pub objective: Objective,
    pub patience: usize,
    pub refine_mu: bool,
    pub refine_lambda: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_iters: 60,
            step_factor: 2.0,
            objective: Objective::Psnr,
            patience: 2,
            refine_mu: true,
            refine_lambda: true,
        }
    }
}

impl RefineConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidRange("max_iters must be at least 1".into()));
        }
        if !(self.step_factor > 1.0 && self.step_factor.is_finite()) {
            return Err(Error::InvalidRange(format!("step factor {} must exceed 1", self.step_factor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Mu,
    Lambda,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub param: Param,
    pub cell: usize,
    /// Multiplier applied when accepted, otherwise the best rejected one.
    pub factor: f64,
    pub accepted: bool,
    /// Best objective after this iteration.
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub map: HyperParamMap,
    pub initial_objective: f64,
    pub objective: f64,
    pub trace: Vec<TraceEntry>,
}

impl RefineOutcome {
    pub fn accepted_moves(&self) -> usize {
        self.trace.iter().filter(|t| t.accepted).count()
    }
}

/// Calibration pairs with their spectra precomputed for one PSF map.
pub struct Calibration<'a> {
    pairs: Vec<(Prepared, &'a Image)>,
}

impl<'a> Calibration<'a> {
    pub fn new(psf: &PsfMap, pairs: &'a [(Image, Image)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::NoPairs);
        }
        let pairs = pairs
            .iter()
            .map(|(y, x)| {
                ensure_same_dims(y, x)?;
                Ok((Prepared::new(y, psf, None)?, x))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Calibration { pairs })
    }

    pub fn evaluate(&self, map: &HyperParamMap, projector: &Projector, objective: Objective) -> Result<f64> {
        let scores = self
            .pairs
            .par_iter()
            .map(|(prepared, sharp)| {
                let restored = prepared.solve(map.stages, map, projector)?;
                score(&restored, sharp, objective)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("refinement objective".into()));
        }
        Ok(mean)
    }
}

fn score(restored: &Image, sharp: &Image, objective: Objective) -> Result<f64> {
    match objective {
        Objective::Psnr => Ok(psnr(restored, sharp, 1.0)?.min(PSNR_CAP_DB)),
        Objective::L1 => {
            ensure_same_dims(restored, sharp)?;
            let n = restored.len().max(1) as f64;
            Ok(-restored
                .iter()
                .zip(sharp.iter())
                .map(|(a, b)| (*a as f64 - *b as f64).abs())
                .sum::<f64>()
                / n)
        }
    }
}

/// Mean objective of `solve()` outputs over the pairs.
pub fn evaluate_map(
    psf: &PsfMap,
    pairs: &[(Image, Image)],
    map: &HyperParamMap,
    projector: &Projector,
    objective: Objective,
) -> Result<f64> {
    map.check_covers(map.stages, psf)?;
    Calibration::new(psf, pairs)?.evaluate(map, projector, objective)
}

fn scaled(map: &HyperParamMap, param: Param, cell: usize, factor: f64) -> HyperParamMap {
    let mut out = map.clone();
    let cells = map.rows * map.cols;
    debug_assert!(cell < cells);
    for stage in 0..map.stages {
        for ch in 0..map.channels {
            let i = map.index(stage, cell, ch);
            let v = match param {
                Param::Mu => &mut out.mu[i],
                Param::Lambda => &mut out.lambda[i],
            };
            *v = (*v as f64 * factor) as f32;
        }
    }
    out
}

pub fn refine(
    psf: &PsfMap,
    pairs: &[(Image, Image)],
    init: &HyperParamMap,
    config: &RefineConfig,
    projector: &Projector,
) -> Result<RefineOutcome> {
    config.validate()?;
    init.check_covers(init.stages, psf)?;
    let calibration = Calibration::new(psf, pairs)?;
    let eval = |map: &HyperParamMap| calibration.evaluate(map, projector, config.objective);

    let mut coords = Vec::new();
    for cell in 0..init.rows * init.cols {
        if config.refine_mu {
            coords.push((Param::Mu, cell));
        }
        if config.refine_lambda {
            coords.push((Param::Lambda, cell));
        }
    }

    let initial = eval(init)?;
    let mut best_map = init.clone();
    let mut best = initial;
    let mut trace = Vec::new();
    if coords.is_empty() {
        return Ok(RefineOutcome {
            map: best_map,
            initial_objective: initial,
            objective: best,
            trace,
        });
    }

    let mut log_step = config.step_factor.ln();
    let mut barren = 0;
    let mut iteration = 0;
    'search: loop {
        let mut accepted_any = false;
        for &(param, cell) in &coords {
            if iteration >= config.max_iters {
                break 'search;
            }
            iteration += 1;
            let up = log_step.exp();
            let mut candidate: Option<(f64, HyperParamMap, f64)> = None;
            for factor in [up, 1.0 / up] {
                let map = scaled(&best_map, param, cell, factor);
                let value = eval(&map)?;
                if candidate.as_ref().is_none_or(|(v, _, _)| value > *v) {
                    candidate = Some((value, map, factor));
                }
            }
            let (value, map, factor) = candidate.expect("two candidates evaluated");
            let accepted = value > best;
            if accepted {
                best = value;
                best_map = map;
                accepted_any = true;
            }
            trace.push(TraceEntry {
                iteration,
                param,
                cell,
                factor,
                accepted,
                objective: best,
            });
        }
        if accepted_any {
            barren = 0;
        } else {
            barren += 1;
            if barren >= config.patience.max(1) {
                break;
            }
            log_step *= 0.5;
        }
    }
    Ok(RefineOutcome {
        map: best_map,
        initial_objective: initial,
        objective: best,
        trace,
    })
}

/// `iteration,param,cell,factor,accepted,objective` table.
pub fn trace_to_csv(trace: &[TraceEntry]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("iteration,param,cell,factor,accepted,objective\n");
    for t in trace {
        let param = match t.param {
            Param::Mu => "mu",
            Param::Lambda => "lambda",
        };
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{},{:.6}",
            t.iteration, param, t.cell, t.factor, t.accepted, t.objective
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyper::default_schedules;
    use crate::psf::Kernel;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize), seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.random::<f32>())
    }

    fn delta_psf() -> PsfMap {
        PsfMap::uniform(1, 1, 3, Kernel::delta(3).unwrap()).unwrap()
    }

    #[test]
    fn perfect_pair_is_capped() {
        let x = random((3, 24, 24), 1);
        let psf = delta_psf();
        let mut map = default_schedules(1, &psf).unwrap();
        map.mu.iter_mut().for_each(|m| *m = 1e-7);
        let v = evaluate_map(&psf, &[(x.clone(), x)], &map, &Projector::Identity, Objective::Psnr).unwrap();
        assert_eq!(v, PSNR_CAP_DB);
    }

    #[test]
    fn duplicated_pairs_keep_the_mean() {
        let x = random((3, 24, 24), 2);
        let y = x.mapv(|v| v * 0.9 + 0.05);
        let psf = delta_psf();
        let map = default_schedules(2, &psf).unwrap();
        let one = evaluate_map(&psf, &[(y.clone(), x.clone())], &map, &Projector::Identity, Objective::Psnr).unwrap();
        let two = evaluate_map(
            &psf,
            &[(y.clone(), x.clone()), (y, x)],
            &map,
            &Projector::Identity,
            Objective::Psnr,
        )
        .unwrap();
        assert!((one - two).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let psf = delta_psf();
        let map = default_schedules(1, &psf).unwrap();
        assert!(matches!(
            refine(&psf, &[], &map, &RefineConfig::default(), &Projector::Identity),
            Err(Error::NoPairs)
        ));
        let x = random((3, 24, 24), 3);
        let bad = RefineConfig {
            step_factor: 1.0,
            ..Default::default()
        };
        assert!(refine(&psf, &[(x.clone(), x)], &map, &bad, &Projector::Identity).is_err());
    }
}
