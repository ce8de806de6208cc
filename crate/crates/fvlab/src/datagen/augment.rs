use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use super::{Corruption, DatasetId, FusionSample};
use crate::rng::{derive_seed, FvRng};
use crate::Result;
use rand::SeedableRng;

/// Rigid-ish transform of the target object, shared by target and contexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricTransform {
    pub flip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Default for GeometricTransform {
    fn default() -> Self {
        Self { flip: false, rotation_deg: 0.0, scale: 1.0, shift_x: 0.0, shift_y: 0.0 }
    }
}

impl GeometricTransform {
    pub fn flip_only() -> Self {
        Self { flip: true, ..Default::default() }
    }

    fn is_affine_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && self.shift_x == 0.0 && self.shift_y == 0.0
    }

    /// Applies the affine part (bilinear, zero fill) and then the flip.
    pub fn apply(&self, image: &ImageTensor) -> ImageTensor {
        let warped = if self.is_affine_identity() { image.clone() } else { self.warp(image) };
        if self.flip { warped.flip_horizontal() } else { warped }
    }

    fn warp(&self, image: &ImageTensor) -> ImageTensor {
        let (ch, h, w) = image.shape();
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let mut out = ImageTensor::zeros(ch, h, w);
        let sample = |k: usize, y: f64, x: f64| -> f64 {
            if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
                return 0.0;
            }
            let y = y.clamp(0.0, (h - 1) as f64);
            let x = x.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (wy, wx) = (y - y0 as f64, x - x0 as f64);
            (1.0 - wy) * ((1.0 - wx) * image.get(k, y0, x0) as f64 + wx * image.get(k, y0, x1) as f64)
                + wy * ((1.0 - wx) * image.get(k, y1, x0) as f64 + wx * image.get(k, y1, x1) as f64)
        };
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx - self.shift_x;
                let dy = y as f64 + 0.5 - cy - self.shift_y;
                let u = (c * dx + s * dy) / self.scale + cx - 0.5;
                let v = (-s * dx + c * dy) / self.scale + cy - 0.5;
                for k in 0..ch {
                    out.set(k, y, x, sample(k, v, u) as f32);
                }
            }
        }
        out
    }
}

/// Per-dataset augmentation ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_shift_frac: f64,
    /// Re-sample context corruption from the transformed target.
    pub live_corruption: bool,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self { flip_prob: 0.0, max_rotation_deg: 0.0, min_scale: 1.0, max_scale: 1.0, max_shift_frac: 0.0, live_corruption: false }
    }

    pub fn for_dataset(dataset: DatasetId) -> Self {
        match dataset {
            DatasetId::FusionMnist => Self { live_corruption: true, ..Self::identity() },
            DatasetId::FusionCeleba => Self { flip_prob: 0.5, live_corruption: true, ..Self::identity() },
            DatasetId::FusionTless => Self {
                flip_prob: 0.5,
                max_rotation_deg: 15.0,
                min_scale: 0.9,
                max_scale: 1.1,
                max_shift_frac: 0.06,
                live_corruption: true,
            },
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> GeometricTransform {
        // always consume the same number of draws so streams stay aligned
        let u: [f64; 5] = std::array::from_fn(|_| rng.random::<f64>());
        GeometricTransform {
            flip: u[0] < self.flip_prob,
            rotation_deg: (2.0 * u[1] - 1.0) * self.max_rotation_deg,
            scale: self.min_scale + u[2] * (self.max_scale - self.min_scale),
            shift_x: (2.0 * u[3] - 1.0) * self.max_shift_frac * 64.0,
            shift_y: (2.0 * u[4] - 1.0) * self.max_shift_frac * 64.0,
        }
    }
}

/// Applies one geometric transform to the target and every context. With live
/// corruption, contexts are instead re-derived from the transformed target with
/// fresh per-context corruption.
pub fn augment<R: Rng + ?Sized>(
    sample: &FusionSample,
    rng: &mut R,
    policy: &AugmentPolicy,
    corruption: Option<&Corruption>,
) -> Result<FusionSample> {
    let t = policy.draw(rng);
    let target = t.apply(&sample.target);
    let contexts = match (policy.live_corruption, corruption) {
        (true, Some(corr)) => {
            let base = rng.random::<u64>();
            (0..sample.contexts.len())
                .map(|i| {
                    let mut crng = FvRng::seed_from_u64(derive_seed(base, &[i as u64]));
                    corr.apply(&target, &mut crng).map(|(img, _)| img)
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => sample.contexts.iter().map(|c| t.apply(c)).collect(),
    };
    let mut meta = sample.meta.clone();
    meta.transform = Some(t);
    Ok(FusionSample { target, contexts, meta })
}

/// Number of context images for one batch, uniform on `{0, 1, 2, 3}`.
pub fn sample_context_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(0..=3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SampleMeta;
    use crate::rng::rng_from;

    fn ramp() -> ImageTensor {
        ImageTensor::new(1, 4, 4, (0..16).map(|i| i as f32 / 15.0).collect()).unwrap()
    }

    #[test]
    fn zero_flip_probability_is_identity() {
        let policy = AugmentPolicy::identity();
        let s = FusionSample { target: ramp(), contexts: vec![ramp()], meta: SampleMeta::default() };
        let mut rng = rng_from(0, &[]);
        for _ in 0..10 {
            let a = augment(&s, &mut rng, &policy, None).unwrap();
            assert_eq!(a.target, s.target);
            assert_eq!(a.contexts, s.contexts);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let t = GeometricTransform::flip_only();
        let img = ramp();
        assert_ne!(t.apply(&img), img);
        assert_eq!(t.apply(&t.apply(&img)), img);
    }

    #[test]
    fn same_transform_for_target_and_contexts() {
        let policy = AugmentPolicy { live_corruption: false, ..AugmentPolicy::for_dataset(DatasetId::FusionTless) };
        let s = FusionSample { target: ramp(), contexts: vec![ramp(), ramp()], meta: SampleMeta::default() };
        let a = augment(&s, &mut rng_from(3, &[]), &policy, None).unwrap();
        assert_eq!(a.contexts[0], a.target);
        assert_eq!(a.contexts[1], a.target);
    }

    #[test]
    fn context_count_support_and_determinism() {
        let mut rng = rng_from(11, &[]);
        let draws: Vec<usize> = (0..1000).map(|_| sample_context_count(&mut rng)).collect();
        assert!(draws.iter().all(|&k| k <= 3));
        let mut rng2 = rng_from(11, &[]);
        let again: Vec<usize> = (0..1000).map(|_| sample_context_count(&mut rng2)).collect();
        assert_eq!(draws, again);
    }
}
