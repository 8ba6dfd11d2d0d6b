//! Prior-imposition step `x = P(z, λ)`.
//!
//! Every projector receives the assembled whole-image estimate `z` together
//! with a full-resolution λ map (one plane per color channel, constant inside
//! each patch cell) and returns an image of the same shape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image::{ensure_finite, Image};

pub mod cnn;
pub mod tv;

pub use cnn::{load_weights, save_weights, project_cnn, Architecture, CnnWeights};
pub use tv::{project_tv, tv_seminorm, DEFAULT_TV_ITERATIONS};

#[derive(Debug, Clone)]
pub struct ProjectorInput {
    pub z: Image,
    pub lambda: Image,
}

impl ProjectorInput {
    pub fn new(z: Image, lambda: Image) -> Result<Self> {
        if z.dim() != lambda.dim() {
            return Err(Error::dims(format!(
                "z is {:?} but the lambda map is {:?}",
                z.dim(),
                lambda.dim()
            )));
        }
        if !lambda.iter().all(|&l| l > 0.0 && l.is_finite()) {
            return Err(Error::InvalidRange("lambda map entries must be positive and finite".into()));
        }
        Ok(ProjectorInput { z, lambda })
    }
}

#[derive(Debug, Clone)]
pub enum Projector {
    Identity,
    Tv { iterations: usize },
    Cnn(Arc<CnnWeights>),
}

impl Default for Projector {
    fn default() -> Self {
        Projector::Tv {
            iterations: DEFAULT_TV_ITERATIONS,
        }
    }
}

impl Projector {
    pub fn name(&self) -> &'static str {
        match self {
            Projector::Identity => "identity",
            Projector::Tv { .. } => "tv",
            Projector::Cnn(_) => "cnn",
        }
    }

    pub fn project(&self, input: &ProjectorInput) -> Result<Image> {
        match self {
            Projector::Identity => Ok(project_identity(input)),
            Projector::Tv { iterations } => project_tv(input, *iterations),
            Projector::Cnn(weights) => {
                ensure_finite(&input.z, "projector input")?;
                project_cnn(input, weights)
            }
        }
    }
}

pub fn project_identity(input: &ProjectorInput) -> Image {
    input.z.clone()
}
