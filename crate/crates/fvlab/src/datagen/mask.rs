use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{BinaryMask, ImageTensor};
use crate::{Error, Result};

/// Distribution of the random ellipses whose union forms a visibility mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    /// Semi-axis range as a fraction of `min(h, w)`.
    pub min_axis_frac: f64,
    pub max_axis_frac: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { min_ellipses: 1, max_ellipses: 3, min_axis_frac: 0.1, max_axis_frac: 0.4 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_ellipses == 0 || self.min_ellipses > self.max_ellipses {
            return Err(Error::config("ellipse count range must satisfy 1 <= min <= max"));
        }
        if !(self.min_axis_frac >= 0.0 && self.min_axis_frac <= self.max_axis_frac && self.max_axis_frac > 0.0) {
            return Err(Error::config("ellipse axis range must satisfy 0 <= min <= max, max > 0"));
        }
        Ok(())
    }
}

/// One sampled ellipse in pixel units; pixel centres sit at `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = px - self.cx;
        let dy = py - self.cy;
        let u = (dx * c + dy * s) / self.semi_a;
        let v = (-dx * s + dy * c) / self.semi_b;
        u * u + v * v <= 1.0
    }
}

fn sample_ellipse<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, cfg: &MaskConfig) -> Ellipse {
    let side = h.min(w) as f64;
    loop {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        let semi_a = side * (cfg.min_axis_frac + rng.random::<f64>() * (cfg.max_axis_frac - cfg.min_axis_frac));
        let semi_b = side * (cfg.min_axis_frac + rng.random::<f64>() * (cfg.max_axis_frac - cfg.min_axis_frac));
        let angle = rng.random::<f64>() * std::f64::consts::PI;
        // zero-axis ellipses are resampled, never emitted
        if semi_a > 0.0 && semi_b > 0.0 {
            return Ellipse { cx, cy, semi_a, semi_b, angle };
        }
    }
}

/// Union of a random number of random ellipses. Never returns an empty mask.
pub fn gen_ellipse_mask<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, cfg: &MaskConfig) -> Result<BinaryMask> {
    gen_ellipse_mask_with_params(rng, h, w, cfg).map(|(m, _)| m)
}

pub fn gen_ellipse_mask_with_params<R: Rng + ?Sized>(
    rng: &mut R,
    h: usize,
    w: usize,
    cfg: &MaskConfig,
) -> Result<(BinaryMask, Vec<Ellipse>)> {
    if h == 0 || w == 0 {
        return Err(Error::shape("mask size must be positive"));
    }
    cfg.validate()?;
    loop {
        let n = rng.random_range(cfg.min_ellipses..=cfg.max_ellipses);
        let ellipses: Vec<Ellipse> = (0..n).map(|_| sample_ellipse(rng, h, w, cfg)).collect();
        let mut mask = BinaryMask::filled(h, w, false);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if ellipses.iter().any(|e| e.contains(px, py)) {
                    mask.set(y, x, true);
                }
            }
        }
        if mask.any() {
            return Ok((mask, ellipses));
        }
    }
}

/// Masked, noisy view of a target: pixels outside the mask are blackened, then
/// Gaussian noise is added everywhere and the result clipped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub mask: MaskConfig,
    pub noise_std: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { mask: MaskConfig::default(), noise_std: 0.3 }
    }
}

pub fn corrupt_with_mask<R: Rng + ?Sized>(
    target: &ImageTensor,
    mask: &BinaryMask,
    noise_std: f64,
    rng: &mut R,
) -> Result<ImageTensor> {
    let masked = mask.apply(target)?;
    if noise_std <= 0.0 {
        return Ok(masked);
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::config(e.to_string()))?;
    let (c, h, w) = masked.shape();
    let data = masked.data().iter().map(|&v| (v as f64 + normal.sample(rng)) as f32).collect();
    ImageTensor::from_clipped(c, h, w, data)
}

/// Corruption used by the MNIST and CelebA fusion sets: fresh ellipse mask plus noise.
pub fn corrupt_mnist<R: Rng + ?Sized>(
    target: &ImageTensor,
    rng: &mut R,
    cfg: &CorruptionConfig,
) -> Result<(ImageTensor, BinaryMask)> {
    let mask = gen_ellipse_mask(rng, target.height(), target.width(), &cfg.mask)?;
    let out = corrupt_with_mask(target, &mask, cfg.noise_std, rng)?;
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn full_frame_ellipse_gives_all_true() {
        let cfg = MaskConfig { min_ellipses: 1, max_ellipses: 1, min_axis_frac: 3.0, max_axis_frac: 3.0 };
        let mut rng = rng_from(1, &[]);
        for _ in 0..20 {
            let m = gen_ellipse_mask(&mut rng, 16, 16, &cfg).unwrap();
            assert_eq!(m.count(), 256);
        }
    }

    #[test]
    fn same_seed_same_mask() {
        let cfg = MaskConfig::default();
        let a = gen_ellipse_mask(&mut rng_from(9, &[4]), 32, 32, &cfg).unwrap();
        let b = gen_ellipse_mask(&mut rng_from(9, &[4]), 32, 32, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.any());
    }

    #[test]
    fn degenerate_axes_are_resampled() {
        let cfg = MaskConfig { min_ellipses: 1, max_ellipses: 1, min_axis_frac: 0.0, max_axis_frac: 0.05 };
        let mut rng = rng_from(2, &[]);
        for _ in 0..50 {
            assert!(gen_ellipse_mask(&mut rng, 32, 32, &cfg).unwrap().any());
        }
    }

    #[test]
    fn identity_and_blackout() {
        let mut rng = rng_from(0, &[]);
        let target = ImageTensor::new(1, 2, 2, vec![0.1, 0.5, 0.9, 1.0]).unwrap();
        let all = BinaryMask::filled(2, 2, true);
        let none = BinaryMask::filled(2, 2, false);
        assert_eq!(corrupt_with_mask(&target, &all, 0.0, &mut rng).unwrap(), target);
        assert_eq!(corrupt_with_mask(&target, &none, 0.0, &mut rng).unwrap(), ImageTensor::zeros(1, 2, 2));
    }

    #[test]
    fn zero_noise_locality() {
        let mut rng = rng_from(5, &[]);
        let data: Vec<f32> = (0..32 * 32).map(|i| (i % 17) as f32 / 16.0).collect();
        let target = ImageTensor::new(1, 32, 32, data).unwrap();
        let cfg = CorruptionConfig { noise_std: 0.0, ..Default::default() };
        let (ctx, mask) = corrupt_mnist(&target, &mut rng, &cfg).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let expect = if mask.get(y, x) { target.get(0, y, x) } else { 0.0 };
                assert_eq!(ctx.get(0, y, x), expect);
            }
        }
    }
}
