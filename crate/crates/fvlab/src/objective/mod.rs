//! Training objective: reconstruction log-likelihood plus warm-up and
//! balance weighted per-group KL divergences.

mod likelihood;
pub mod toy;

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::aggregation::GaussianFeature;
use crate::{Error, Result};

pub use likelihood::{discretized_logistic_log_prob, log_softmax, uniform_log_likelihood, LikelihoodParams, MixtureParts};

/// KL(q || p) between factorized Gaussians, summed over all but the batch
/// dimension. Returns `[B]`.
pub fn gaussian_kl(q: &GaussianFeature, p: &GaussianFeature) -> Result<Tensor> {
    if q.mu.shape() != p.mu.shape() || q.var.shape() != p.var.shape() || q.mu.shape() != q.var.shape() {
        return Err(Error::shape(format!("kl between {:?} and {:?}", q.mu.shape(), p.mu.shape())));
    }
    let kl = gaussian_kl_elementwise(q, p)?;
    Ok(kl.flatten_from(1)?.sum(1)?)
}

/// Element-wise `(e^t - 1 - t) / 2 + (mq - mp)^2 / (2 vp)` with `t = ln(vq / vp)`.
///
/// Evaluated in f64: both terms are then nonnegative for f32 inputs, so a
/// collapsed group cannot report a slightly negative KL from cancellation.
pub fn gaussian_kl_elementwise(q: &GaussianFeature, p: &GaussianFeature) -> Result<Tensor> {
    let f = |t: &Tensor| t.to_dtype(DType::F64);
    let t = (f(&q.var)?.log()? - f(&p.var)?.log()?)?;
    let spread = ((t.exp()? - 1.0)? - &t)?;
    let shift = ((f(&q.mu)? - f(&p.mu)?)?.sqr()? / f(&p.var)?)?;
    Ok(((spread + shift)? * 0.5)?.to_dtype(q.mu.dtype())?)
}

/// Validating variant of [`gaussian_kl`] for untrusted inputs.
pub fn gaussian_kl_checked(q: &GaussianFeature, p: &GaussianFeature) -> Result<Tensor> {
    q.validate()?;
    p.validate()?;
    gaussian_kl(q, p)
}

/// Linear KL warm-up: `min(1, step / warmup_steps)`.
pub fn beta_schedule(step: u64, warmup_steps: u64) -> Result<f64> {
    if warmup_steps == 0 {
        return Err(Error::config("warm-up length must be positive"));
    }
    Ok((step as f64 / warmup_steps as f64).min(1.0))
}

/// Balancing coefficients `alpha_l ∝ size_l * ema_l`, normalized to sum to L.
/// An all-zero EMA gives uniform coefficients.
pub fn alpha_balance(kl_ema: &[f64], group_sizes: &[usize]) -> Result<Vec<f64>> {
    if kl_ema.len() != group_sizes.len() || kl_ema.is_empty() {
        return Err(Error::shape("one EMA and one size per group"));
    }
    let raw: Vec<f64> = kl_ema.iter().zip(group_sizes).map(|(e, &s)| e.max(0.0) * s as f64).collect();
    let total: f64 = raw.iter().sum();
    let l = raw.len() as f64;
    if !(total > 0.0) || !total.is_finite() {
        return Ok(vec![1.0; raw.len()]);
    }
    Ok(raw.iter().map(|r| l * r / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlphaMode {
    Uniform,
    SizeWeighted,
    EmaBalanced,
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "size-weighted" => Ok(Self::SizeWeighted),
            "ema-balanced" => Ok(Self::EmaBalanced),
            _ => Err(Error::config(format!("unknown alpha mode {s:?}"))),
        }
    }
}

/// KL warm-up and balancing state advanced once per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: u64,
    pub warmup_steps: u64,
    pub alpha_mode: AlphaMode,
    /// EMA of each group's mean per-dimension KL.
    pub kl_ema: Vec<f64>,
    pub ema_decay: f64,
    pub group_sizes: Vec<usize>,
}

impl ScheduleState {
    pub fn new(warmup_steps: u64, group_sizes: Vec<usize>, alpha_mode: AlphaMode) -> Self {
        Self { step: 0, warmup_steps: warmup_steps.max(1), alpha_mode, kl_ema: vec![0.0; group_sizes.len()], ema_decay: 0.99, group_sizes }
    }

    pub fn beta(&self) -> f64 {
        beta_schedule(self.step, self.warmup_steps).unwrap_or(1.0)
    }

    pub fn in_warmup(&self) -> bool {
        self.step < self.warmup_steps
    }

    pub fn alphas(&self) -> Vec<f64> {
        let l = self.group_sizes.len();
        if !self.in_warmup() {
            return vec![1.0; l];
        }
        match self.alpha_mode {
            AlphaMode::Uniform => vec![1.0; l],
            AlphaMode::SizeWeighted => alpha_balance(&vec![1.0; l], &self.group_sizes).unwrap_or_else(|_| vec![1.0; l]),
            AlphaMode::EmaBalanced => alpha_balance(&self.kl_ema, &self.group_sizes).unwrap_or_else(|_| vec![1.0; l]),
        }
    }

    /// Folds one batch's per-group KL (nats per sample) into the EMA.
    pub fn observe(&mut self, kl_per_group: &[f64]) {
        let first = self.step == 0 && self.kl_ema.iter().all(|&v| v == 0.0);
        for ((ema, &kl), &size) in self.kl_ema.iter_mut().zip(kl_per_group).zip(&self.group_sizes) {
            let per_dim = kl / size.max(1) as f64;
            *ema = if first { per_dim } else { self.ema_decay * *ema + (1.0 - self.ema_decay) * per_dim };
        }
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }
}

/// Scalar summary of one loss evaluation, averaged over the batch (nats per sample).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_ll: f64,
    pub kl_per_group: Vec<f64>,
    pub beta: f64,
    pub alpha: Vec<f64>,
    pub total: f64,
}

/// Assembles `total = -recon + beta * sum_l alpha_l KL_l` from per-sample
/// reconstruction log-likelihoods and per-group KLs (each `[B]`). Returns the
/// batch-mean loss tensor for backpropagation and its breakdown.
pub fn fusionvae_elbo(recon_ll: &Tensor, kls: &[Tensor], beta: f64, alpha: &[f64]) -> Result<(Tensor, LossBreakdown)> {
    if kls.len() != alpha.len() {
        return Err(Error::shape(format!("{} KL terms vs {} balancing weights", kls.len(), alpha.len())));
    }
    let recon = recon_ll.mean_all()?;
    let mut total = recon.neg()?;
    let mut kl_vals = Vec::with_capacity(kls.len());
    for (kl, &a) in kls.iter().zip(alpha) {
        let m = kl.mean_all()?;
        kl_vals.push(m.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        if beta * a != 0.0 {
            total = (total + (m * (beta * a))?)?;
        }
    }
    let breakdown = LossBreakdown {
        recon_ll: recon.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        kl_per_group: kl_vals,
        beta,
        alpha: alpha.to_vec(),
        total: total.to_dtype(DType::F64)?.to_scalar::<f64>()?,
    };
    Ok((total, breakdown))
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub beta: f64,
    pub kl: Vec<f64>,
    pub recon: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn new(step: u64, b: &LossBreakdown) -> Self {
        Self { step, beta: b.beta, kl: b.kl_per_group.clone(), recon: b.recon_ll, total: b.total }
    }
}

/// Appends JSON records, one per line.
pub struct JsonlWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: std::io::BufWriter::new(f) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("<jsonl>", e))
    }
}
