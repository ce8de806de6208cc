//! Network definitions and the interface shared by the fusion model and its baselines.

pub mod cells;
pub mod config;
pub mod fusion;

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use config::{HierarchySpec, LikelihoodKind, ModelConfig, PosteriorVariant, PriorMode, ScaleSpec};
pub use fusion::{skip_fuse, FusionVae, Latents};

use crate::nn::{Mode, ParamStore};
use crate::objective::LossBreakdown;
use crate::rng::Noise;
use crate::{Error, Result};

/// One training or evaluation batch: the target and `K` context images, all `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub target: Tensor,
    pub contexts: Vec<Tensor>,
}

impl Batch {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.target.dim(0)?)
    }

    pub fn k(&self) -> usize {
        self.contexts.len()
    }

    /// Keeps only the first `k` contexts.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        if k > self.contexts.len() {
            return Err(Error::invalid(format!("batch has {} contexts, asked for {k}", self.contexts.len())));
        }
        Ok(Self { target: self.target.clone(), contexts: self.contexts[..k].to_vec() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    FusionVae,
    Cvae,
    CvaeS,
    Fcn,
    FcnS,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [Self::FusionVae, Self::Cvae, Self::CvaeS, Self::Fcn, Self::FcnS];

    pub fn name(self) -> &'static str {
        match self {
            Self::FusionVae => "fusionvae",
            Self::Cvae => "cvae",
            Self::CvaeS => "cvae+s",
            Self::Fcn => "fcn",
            Self::FcnS => "fcn+s",
        }
    }

    /// Deterministic models have no likelihood, so NLL is not reported for them.
    pub fn is_probabilistic(self) -> bool {
        !matches!(self, Self::Fcn | Self::FcnS)
    }

    pub fn uses_skips(self) -> bool {
        matches!(self, Self::CvaeS | Self::FcnS)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = if s.eq_ignore_ascii_case("fusion-vae") { "fusionvae" } else { s };
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown model {s:?}; expected one of fusionvae, cvae, cvae+s, fcn, fcn+s")))
    }
}

/// Operations the trainer and evaluator need from any model.
pub trait FusionModel {
    fn kind(&self) -> ModelKind;

    fn store(&self) -> &ParamStore;

    fn model_config(&self) -> &ModelConfig;

    fn group_sizes(&self) -> Vec<usize>;

    fn num_params(&self) -> usize {
        self.store().num_params()
    }

    /// Scalar loss (mean over the batch, nats) and its parts.
    fn train_loss(&self, batch: &Batch, beta: f64, alpha: &[f64], noise: &mut Noise, mode: Mode) -> Result<(Tensor, LossBreakdown)>;

    /// `n` outputs for the given contexts, each `[B, C, H, W]` in [0, 1].
    /// `batch` is needed when there are no contexts.
    fn sample(&self, contexts: &[Tensor], batch: usize, n: usize, temperature: f64, noise: &mut Noise) -> Result<Vec<Tensor>>;

    /// `[S, B]` log importance weights `log p(y, z | X) - log q(z | ...)`, or
    /// `None` for deterministic models.
    fn log_importance_weights(&self, batch: &Batch, samples: usize, noise: &mut Noise) -> Result<Option<Tensor>>;

    /// Reconstruction: the target itself is one of the inputs, followed by
    /// any extra (typically corrupted) views.
    fn reconstruct(&self, target: &Tensor, extra: &[Tensor], n: usize, temperature: f64, noise: &mut Noise) -> Result<Vec<Tensor>> {
        let mut inputs = Vec::with_capacity(extra.len() + 1);
        inputs.push(target.clone());
        inputs.extend(extra.iter().cloned());
        self.sample(&inputs, target.dim(0)?, n, temperature, noise)
    }
}
