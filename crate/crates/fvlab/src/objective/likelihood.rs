//! Decoder output distributions: pixel-wise Bernoulli and discretized
//! logistic mixtures over 256 intensity levels.

use candle_core::{DType, Tensor};

use crate::model::LikelihoodKind;
use crate::nn::{log_sigmoid, sigmoid, softplus};
use crate::{Error, Result};

/// Lower clamp on mixture log-scales.
const MIN_LOG_SCALE: f64 = -7.0;

/// Raw decoder output together with its interpretation.
#[derive(Debug, Clone)]
pub enum LikelihoodParams {
    /// Logits `[B, C, H, W]`.
    Bernoulli { logits: Tensor },
    /// `[B, M*(1 + 2C + C(C-1)/2), H, W]`: mixture logits, then per channel
    /// means and log-scales, then coupling coefficients.
    LogisticMixture { raw: Tensor, channels: usize, components: usize },
}

/// Split view of mixture parameters, each `[B, M, H, W]` or `[B, C, M, H, W]`.
pub struct MixtureParts {
    pub logits: Tensor,
    pub means: Tensor,
    pub log_scales: Tensor,
    /// `[B, C(C-1)/2, M, H, W]`, squashed by tanh.
    pub coeffs: Option<Tensor>,
}

impl LikelihoodParams {
    pub fn from_raw(kind: LikelihoodKind, raw: Tensor, channels: usize) -> Self {
        match kind {
            LikelihoodKind::Bernoulli => Self::Bernoulli { logits: raw },
            LikelihoodKind::LogisticMixture { components } => Self::LogisticMixture { raw, channels, components },
        }
    }

    pub fn raw(&self) -> &Tensor {
        match self {
            Self::Bernoulli { logits } => logits,
            Self::LogisticMixture { raw, .. } => raw,
        }
    }

    /// Rejects NaN or infinite parameters with a short diagnostic.
    pub fn check_finite(&self) -> Result<()> {
        let t = self.raw().to_dtype(DType::F64)?.flatten_all()?;
        let sum = t.abs()?.sum_all()?.to_scalar::<f64>()?;
        if !sum.is_finite() {
            let v = t.to_vec1::<f64>()?;
            let nan = v.iter().filter(|x| x.is_nan()).count();
            let inf = v.iter().filter(|x| x.is_infinite()).count();
            return Err(Error::NonFinite { what: "likelihood parameters", detail: format!("{nan} NaN and {inf} infinite of {}", v.len()) });
        }
        Ok(())
    }

    pub fn mixture_parts(&self) -> Result<MixtureParts> {
        let Self::LogisticMixture { raw, channels, components } = self else {
            return Err(Error::invalid("not a mixture likelihood"));
        };
        let (c, m) = (*channels, *components);
        let (b, _, h, w) = raw.dims4()?;
        let n_coef = c * (c - 1) / 2;
        let logits = raw.narrow(1, 0, m)?;
        let means = raw.narrow(1, m, c * m)?.reshape((b, c, m, h, w))?;
        let log_scales = raw.narrow(1, m + c * m, c * m)?.reshape((b, c, m, h, w))?.clamp(MIN_LOG_SCALE, f64::INFINITY)?;
        let coeffs = if n_coef > 0 {
            Some(raw.narrow(1, m + 2 * c * m, n_coef * m)?.reshape((b, n_coef, m, h, w))?.tanh()?)
        } else {
            None
        };
        Ok(MixtureParts { logits, means, log_scales, coeffs })
    }

    /// Image-space mean in [0, 1], `[B, C, H, W]`.
    ///
    /// For the mixture this is the component-weighted mean of the clamped
    /// logistic locations, with channel coupling applied to the mean of the
    /// preceding channels.
    pub fn mean(&self) -> Result<Tensor> {
        match self {
            Self::Bernoulli { logits } => sigmoid(logits),
            Self::LogisticMixture { channels, .. } => {
                let p = self.mixture_parts()?;
                let weights = softmax(&p.logits, 1)?; // [B, M, H, W]
                let mut per_channel: Vec<Tensor> = Vec::with_capacity(*channels);
                for ch in 0..*channels {
                    let mut mu = p.means.narrow(1, ch, 1)?.squeeze(1)?; // [B, M, H, W]
                    if let Some(coef) = &p.coeffs {
                        for prev in 0..ch {
                            let ci = coef_index(ch, prev);
                            let cf = coef.narrow(1, ci, 1)?.squeeze(1)?;
                            mu = (mu + cf.broadcast_mul(&per_channel[prev].unsqueeze(1)?)?)?;
                        }
                    }
                    let mu = mu.clamp(-1.0, 1.0)?;
                    per_channel.push((mu * &weights)?.sum(1)?);
                }
                let x = Tensor::stack(&per_channel, 1)?;
                Ok(((x + 1.0)? * 0.5)?)
            }
        }
    }

    /// Per-sample sum of pixel log-probabilities, `[B]`. `y` is `[B, C, H, W]` in [0, 1].
    pub fn log_prob(&self, y: &Tensor) -> Result<Tensor> {
        match self {
            Self::Bernoulli { logits } => {
                if logits.shape() != y.shape() {
                    return Err(Error::shape(format!("logits {:?} vs target {:?}", logits.shape(), y.shape())));
                }
                let pos = (y * log_sigmoid(logits)?)?;
                let neg = (y.affine(-1.0, 1.0)? * log_sigmoid(&logits.neg()?)?)?;
                Ok((pos + neg)?.flatten_from(1)?.sum(1)?)
            }
            Self::LogisticMixture { channels, .. } => {
                let (b, c, _, _) = y.dims4()?;
                if c != *channels {
                    return Err(Error::shape(format!("mixture over {channels} channels vs target with {c}")));
                }
                let p = self.mixture_parts()?;
                // quantize to 256 levels and map onto [-1, 1]
                let x = ((y * 255.0)?.round()? * (2.0 / 255.0))?.affine(1.0, -1.0)?;
                let mut total: Option<Tensor> = None;
                for ch in 0..c {
                    let xc = x.narrow(1, ch, 1)?; // [B, 1, H, W]
                    let mut mu = p.means.narrow(1, ch, 1)?.squeeze(1)?;
                    if let Some(coef) = &p.coeffs {
                        for prev in 0..ch {
                            let cf = coef.narrow(1, coef_index(ch, prev), 1)?.squeeze(1)?;
                            mu = (mu + cf.broadcast_mul(&x.narrow(1, prev, 1)?)?)?;
                        }
                    }
                    let ls = p.log_scales.narrow(1, ch, 1)?.squeeze(1)?;
                    let lp = discretized_logistic_log_prob(&xc, &mu, &ls)?;
                    total = Some(match total {
                        None => lp,
                        Some(t) => (t + lp)?,
                    });
                }
                let log_mix = log_softmax(&p.logits, 1)?;
                let per_pixel = (total.unwrap() + log_mix)?.log_sum_exp(1)?; // [B, H, W]
                Ok(per_pixel.reshape((b, ()))?.sum(1)?)
            }
        }
    }
}

/// Index of the coefficient coupling `ch` to an earlier channel `prev`.
fn coef_index(ch: usize, prev: usize) -> usize {
    ch * (ch - 1) / 2 + prev
}

/// Log-probability of the bin containing `x` (already on the [-1, 1] grid)
/// under a logistic with location `mu` and log-scale `log_s`, with the two
/// edge bins absorbing the tails.
pub fn discretized_logistic_log_prob(x: &Tensor, mu: &Tensor, log_s: &Tensor) -> Result<Tensor> {
    // Edges (2k +- 1) / 255 - 1 from the bin index k, so that neighbouring bins
    // share bit-identical edges and their probabilities telescope. Computing
    // them as (x - mu) +- half a bin rounds differently on each side, which
    // at small scales unnormalizes the distribution by ~1e-5 in f32.
    let two_k = (((x + 1.0)? * 127.5)?.round()? * 2.0)?;
    let upper = (((&two_k + 1.0)? / 255.0)? - 1.0)?;
    let lower = (((&two_k - 1.0)? / 255.0)? - 1.0)?;
    let inv_s = log_s.neg()?.exp()?;
    let plus_in = (&inv_s * upper.broadcast_sub(mu)?)?;
    let min_in = (&inv_s * lower.broadcast_sub(mu)?)?;
    let log_cdf_plus = log_sigmoid(&plus_in)?;
    let log_one_minus_cdf_min = softplus(&min_in)?.neg()?;
    // sigmoid(a) - sigmoid(b) = sigmoid(a) sigmoid(-b) (1 - exp(-(a - b))), free of cancellation
    let gap = (&plus_in - &min_in)?;
    let log_delta = ((&log_cdf_plus + log_sigmoid(&min_in.neg()?)?)? + log1mexp(&gap)?)?;
    let lower_edge = x.lt(-0.999)?.broadcast_as(log_delta.shape())?;
    let upper_edge = x.gt(0.999)?.broadcast_as(log_delta.shape())?;
    let inner = upper_edge.where_cond(&log_one_minus_cdf_min, &log_delta)?;
    Ok(lower_edge.where_cond(&log_cdf_plus, &inner)?)
}

/// `log(1 - exp(-a))` for `a > 0`.
///
/// Evaluated in f64: for narrow-bin gaps around 1e-3 the f32 difference
/// `1 - exp(-a)` loses about four digits, enough to unnormalize the mixture.
fn log1mexp(a: &Tensor) -> Result<Tensor> {
    let dtype = a.dtype();
    let a = a.to_dtype(DType::F64)?;
    let direct = (a.neg()?.exp()?.neg()? + 1.0)?;
    // a - a^2/2 + a^3/6 keeps precision where 1 - exp(-a) cancels
    let series = ((&a - (a.sqr()? * 0.5)?)? + (a.powf(3.0)? / 6.0)?)?;
    let tiny = a.lt(1e-4)?;
    Ok(tiny.where_cond(&series, &direct)?.log()?.to_dtype(dtype)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let lse = x.log_sum_exp(dim)?.unsqueeze(dim)?;
    Ok(x.broadcast_sub(&lse)?)
}

fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    Ok(log_softmax(x, dim)?.exp()?)
}

/// `sum over pixels` log-likelihood for a fixed-probability model; used to
/// express uniform decoders in the same units as learned ones.
pub fn uniform_log_likelihood(levels: usize, dims: usize) -> f64 {
    -(dims as f64) * (levels as f64).ln()
}
