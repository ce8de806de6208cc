//! Permutation-invariant fusion of per-context feature tensors.
//!
//! Mean and max aggregation reduce a set of feature maps pixel-wise. Bayesian
//! aggregation treats every member as a factorized Gaussian observation of a
//! shared latent feature and fuses them by precision weighting, either one
//! observation at a time (Kalman-style gain) or in closed form.

use candle_core::{DType, Device, Shape, Tensor};

use crate::{Error, Result};

/// Lower/upper bound applied to predicted log-variances before exponentiation.
pub const LOGVAR_CLAMP: (f64, f64) = (-8.0, 8.0);

/// Factorized Gaussian over a feature tensor: per-element mean and variance.
#[derive(Debug, Clone)]
pub struct GaussianFeature {
    pub mu: Tensor,
    pub var: Tensor,
}

impl GaussianFeature {
    /// Checked constructor: equal shapes, finite means, strictly positive variances.
    pub fn new(mu: Tensor, var: Tensor) -> Result<Self> {
        if mu.shape() != var.shape() {
            return Err(Error::shape(format!("mean {:?} vs variance {:?}", mu.shape(), var.shape())));
        }
        let g = Self { mu, var };
        g.validate()?;
        Ok(g)
    }

    /// Unchecked constructor for tensors that are positive by construction.
    pub fn from_parts(mu: Tensor, var: Tensor) -> Self {
        Self { mu, var }
    }

    /// Variance from a clamped log-variance prediction.
    pub fn from_logvar(mu: Tensor, logvar: &Tensor) -> Result<Self> {
        let var = logvar.clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1)?.exp()?;
        Ok(Self { mu, var })
    }

    pub fn standard_normal<S: Into<Shape>>(shape: S, dtype: DType, device: &Device) -> Result<Self> {
        let shape: Shape = shape.into();
        Ok(Self { mu: Tensor::zeros(&shape, dtype, device)?, var: Tensor::ones(&shape, dtype, device)? })
    }

    pub fn shape(&self) -> &Shape {
        self.mu.shape()
    }

    pub fn std(&self) -> Result<Tensor> {
        Ok(self.var.sqrt()?)
    }

    pub fn log_var(&self) -> Result<Tensor> {
        Ok(self.var.log()?)
    }

    pub fn validate(&self) -> Result<()> {
        let min_var = min_value(&self.var)?;
        if !(min_var > 0.0) {
            return Err(Error::NonPositiveVariance("gaussian feature"));
        }
        let mu_abs = self.mu.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !mu_abs.is_finite() {
            return Err(Error::NonFinite { what: "gaussian mean", detail: format!("max |mu| = {mu_abs}") });
        }
        Ok(())
    }

    /// Element-wise log-density of `z` under this Gaussian.
    pub fn log_prob(&self, z: &Tensor) -> Result<Tensor> {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let diff = (z - &self.mu)?;
        let quad = (diff.sqr()? / &self.var)?;
        Ok(((quad + self.var.log()?)? + ln2pi)?.affine(-0.5, 0.0)?)
    }
}

fn min_value(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_shapes(features: &[Tensor]) -> Result<()> {
    let first = features.first().ok_or(Error::EmptySet)?;
    if let Some(bad) = features.iter().find(|f| f.shape() != first.shape()) {
        return Err(Error::shape(format!("aggregation over {:?} and {:?}", first.shape(), bad.shape())));
    }
    Ok(())
}

/// Pixel-wise arithmetic mean of a non-empty set.
pub fn mean_agg(features: &[Tensor]) -> Result<Tensor> {
    check_shapes(features)?;
    mean_agg_stacked(&Tensor::stack(features, 0)?)
}

/// Pixel-wise maximum of a non-empty set.
pub fn max_agg(features: &[Tensor]) -> Result<Tensor> {
    check_shapes(features)?;
    max_agg_stacked(&Tensor::stack(features, 0)?)
}

/// Mean over the leading set dimension of a stacked `[K, ...]` tensor.
pub fn mean_agg_stacked(stacked: &Tensor) -> Result<Tensor> {
    let k = stacked.dim(0)?;
    if k == 0 {
        return Err(Error::EmptySet);
    }
    Ok((stacked.sum(0)? / k as f64)?)
}

/// Maximum over the leading set dimension of a stacked `[K, ...]` tensor.
pub fn max_agg_stacked(stacked: &Tensor) -> Result<Tensor> {
    if stacked.dim(0)? == 0 {
        return Err(Error::EmptySet);
    }
    Ok(stacked.max(0)?)
}

fn check_gaussians(prior: Option<&GaussianFeature>, obs: &[GaussianFeature]) -> Result<()> {
    let shape = prior.map(|p| p.shape().clone()).or_else(|| obs.first().map(|o| o.shape().clone()));
    let Some(shape) = shape else { return Err(Error::EmptySet) };
    for g in prior.into_iter().chain(obs) {
        if g.mu.shape() != &shape || g.var.shape() != &shape {
            return Err(Error::shape("bayesian aggregation over mismatched shapes"));
        }
        if !(min_value(&g.var)? > 0.0) {
            return Err(Error::NonPositiveVariance("bayesian aggregation input"));
        }
    }
    Ok(())
}

/// Sequential Bayes-rule fusion. Each observation updates the running
/// estimate with gain `q = var_prev / (var_prev + var_obs)`:
/// `mu <- mu + q * (mu_obs - mu)`, `var <- var * (1 - q)`.
///
/// Without a prior the first observation is the initial state.
pub fn bayes_agg_iter(prior: Option<&GaussianFeature>, obs: &[GaussianFeature]) -> Result<GaussianFeature> {
    check_gaussians(prior, obs)?;
    let (mut state, rest) = match prior {
        Some(p) => (p.clone(), obs),
        None => (obs[0].clone(), &obs[1..]),
    };
    for o in rest {
        let gain = (&state.var / (&state.var + &o.var)?)?;
        let mu = (&state.mu + (&gain * (&o.mu - &state.mu)?)?)?;
        let var = (&state.var * gain.affine(-1.0, 1.0)?)?;
        state = GaussianFeature { mu, var };
    }
    Ok(state)
}

/// Closed-form precision-weighted fusion:
/// `1/var = sum_i 1/var_i`, `mu = var * sum_i mu_i / var_i` over prior and observations.
pub fn bayes_agg_closed(prior: Option<&GaussianFeature>, obs: &[GaussianFeature]) -> Result<GaussianFeature> {
    check_gaussians(prior, obs)?;
    let members: Vec<&GaussianFeature> = prior.into_iter().chain(obs).collect();
    let precisions: Vec<Tensor> = members.iter().map(|g| g.var.recip()).collect::<candle_core::Result<_>>()?;
    let weighted: Vec<Tensor> =
        members.iter().zip(&precisions).map(|(g, p)| &g.mu * p).collect::<candle_core::Result<_>>()?;
    let precision = Tensor::stack(&precisions, 0)?.sum(0)?;
    let var = precision.recip()?;
    let mu = (Tensor::stack(&weighted, 0)?.sum(0)? * &var)?;
    Ok(GaussianFeature { mu, var })
}

/// Closed-form fusion of Gaussians stacked along a leading set dimension
/// (`mu`, `var`: `[K, ...]`). Used inside the network, where validation would
/// force a device sync on every call.
pub fn bayes_agg_stacked(prior: Option<&GaussianFeature>, mu: &Tensor, var: &Tensor) -> Result<GaussianFeature> {
    let k = mu.dim(0)?;
    if k == 0 && prior.is_none() {
        return Err(Error::EmptySet);
    }
    let mut precision = if k > 0 { var.recip()?.sum(0)? } else { prior.unwrap().var.recip()? };
    let mut weighted = if k > 0 { (mu / var)?.sum(0)? } else { (&prior.unwrap().mu / &prior.unwrap().var)? };
    if let (Some(p), true) = (prior, k > 0) {
        precision = (precision + p.var.recip()?)?;
        weighted = (weighted + (&p.mu / &p.var)?)?;
    }
    let var = precision.recip()?;
    let mu = (weighted * &var)?;
    Ok(GaussianFeature { mu, var })
}
