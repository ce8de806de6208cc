//! Conjugate linear-Gaussian model with a closed-form marginal likelihood,
//! used to check the bound assembled by [`super::fusionvae_elbo`].
//!
//! Per dimension: `z ~ N(m_p, v_p)`, `y | z ~ N(a z + c, s2)`.

use candle_core::{Device, Tensor};
use rand::Rng;

use super::{fusionvae_elbo, gaussian_kl, LossBreakdown};
use crate::aggregation::GaussianFeature;
use crate::Result;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone)]
pub struct ConjugateGaussian {
    pub prior_mean: Vec<f64>,
    pub prior_var: Vec<f64>,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub noise_var: Vec<f64>,
    pub y: Vec<f64>,
}

fn log_normal(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v)
}

impl ConjugateGaussian {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dims: usize) -> Self {
        let mut v = |lo: f64, hi: f64| (0..dims).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        Self {
            prior_mean: v(-2.0, 2.0),
            prior_var: v(0.1, 3.0),
            a: v(-2.0, 2.0),
            c: v(-1.0, 1.0),
            noise_var: v(0.05, 2.0),
            y: v(-3.0, 3.0),
        }
    }

    pub fn dims(&self) -> usize {
        self.y.len()
    }

    /// `log p(y)` with `z` integrated out.
    pub fn exact_log_likelihood(&self) -> f64 {
        (0..self.dims())
            .map(|i| {
                let m = self.a[i] * self.prior_mean[i] + self.c[i];
                let v = self.a[i] * self.a[i] * self.prior_var[i] + self.noise_var[i];
                log_normal(self.y[i], m, v)
            })
            .sum()
    }

    /// Exact posterior `p(z | y)` by Gaussian conditioning.
    pub fn exact_posterior(&self) -> (Vec<f64>, Vec<f64>) {
        (0..self.dims())
            .map(|i| {
                let prec = 1.0 / self.prior_var[i] + self.a[i] * self.a[i] / self.noise_var[i];
                let v = 1.0 / prec;
                let m = v * (self.prior_mean[i] / self.prior_var[i] + self.a[i] * (self.y[i] - self.c[i]) / self.noise_var[i]);
                (m, v)
            })
            .unzip()
    }

    /// `E_q[log p(y | z)]` in closed form.
    pub fn expected_recon(&self, q_mean: &[f64], q_var: &[f64]) -> f64 {
        (0..self.dims())
            .map(|i| {
                let r = self.y[i] - self.a[i] * q_mean[i] - self.c[i];
                -0.5 * (LN_2PI + self.noise_var[i].ln() + (r * r + self.a[i] * self.a[i] * q_var[i]) / self.noise_var[i])
            })
            .sum()
    }

    /// Loss breakdown for posterior `q = N(q_mean, q_var)` with a single group and alpha = 1.
    pub fn breakdown(&self, q_mean: &[f64], q_var: &[f64], beta: f64) -> Result<LossBreakdown> {
        let d = self.dims();
        let dev = Device::Cpu;
        let t = |v: &[f64]| Tensor::from_slice(v, (1, d), &dev);
        let q = GaussianFeature::from_parts(t(q_mean)?, t(q_var)?);
        let p = GaussianFeature::from_parts(t(&self.prior_mean)?, t(&self.prior_var)?);
        let kl = gaussian_kl(&q, &p)?;
        let recon = Tensor::from_slice(&[self.expected_recon(q_mean, q_var)], 1, &dev)?;
        Ok(fusionvae_elbo(&recon, &[kl], beta, &[1.0])?.1)
    }

    pub fn loss(&self, q_mean: &[f64], q_var: &[f64], beta: f64) -> Result<f64> {
        Ok(self.breakdown(q_mean, q_var, beta)?.total)
    }
}
