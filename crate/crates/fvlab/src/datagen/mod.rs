//! Multi-image fusion benchmarks: a target image plus up to three corrupted
//! views of it.
//!
//! Every sample is a pure function of `(master seed, split, index, epoch)`, so
//! streams are reproducible and generation parallelizes per sample.

pub mod augment;
pub mod canny;
pub mod celeba;
pub mod image;
pub mod manifest;
pub mod mask;
pub mod mnist;
pub mod tless;

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use self::augment::{augment, sample_context_count, AugmentPolicy, GeometricTransform};
pub use self::canny::{cut_objects_canny, CannyConfig, Sprite, SpriteSet};
pub use self::image::{BinaryMask, ImageTensor};
pub use self::mask::{corrupt_mnist, gen_ellipse_mask, CorruptionConfig, MaskConfig};
pub use self::tless::{compose_tless_occlusion, OcclusionConfig};

use crate::rng::{derive_seed, rng_from, FvRng};
use crate::{Error, Result};

pub const K_MAX: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "fmnist")]
    FusionMnist,
    #[serde(rename = "fceleba")]
    FusionCeleba,
    #[serde(rename = "ftless")]
    FusionTless,
}

impl DatasetId {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetId::FusionMnist => "fmnist",
            DatasetId::FusionCeleba => "fceleba",
            DatasetId::FusionTless => "ftless",
        }
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self {
            DatasetId::FusionMnist => (1, 32, 32),
            DatasetId::FusionCeleba => (3, 64, 64),
            DatasetId::FusionTless => (3, 64, 64),
        }
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fmnist" | "fusionmnist" | "mnist" => Ok(DatasetId::FusionMnist),
            "fceleba" | "fusionceleba" | "celeba" => Ok(DatasetId::FusionCeleba),
            "ftless" | "fusiontless" | "tless" | "t-less" => Ok(DatasetId::FusionTless),
            other => Err(Error::config(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 0x7A,
            Split::Eval => 0xE7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: usize,
    pub dataset: Option<DatasetId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<GeometricTransform>,
    #[serde(default)]
    pub context_params: Vec<serde_json::Value>,
}

/// One fusion task: the target and 0..=3 context views of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub target: ImageTensor,
    pub contexts: Vec<ImageTensor>,
    pub meta: SampleMeta,
}

impl FusionSample {
    pub fn new(target: ImageTensor, contexts: Vec<ImageTensor>, meta: SampleMeta) -> Result<Self> {
        if contexts.len() > K_MAX {
            return Err(Error::invalid(format!("at most {K_MAX} contexts, got {}", contexts.len())));
        }
        if contexts.iter().any(|c| c.shape() != target.shape()) {
            return Err(Error::shape("every context must have the target's shape"));
        }
        Ok(Self { target, contexts, meta })
    }

    /// Keeps the first `k` contexts.
    pub fn truncated(&self, k: usize) -> Self {
        Self { target: self.target.clone(), contexts: self.contexts.iter().take(k).cloned().collect(), meta: self.meta.clone() }
    }
}

/// How a context view is derived from its target.
#[derive(Debug, Clone)]
pub enum Corruption {
    Masks(CorruptionConfig),
    Occlusion { sprites: Arc<SpriteSet>, cfg: OcclusionConfig },
}

impl Corruption {
    pub fn apply<R: Rng + ?Sized>(&self, target: &ImageTensor, rng: &mut R) -> Result<(ImageTensor, serde_json::Value)> {
        match self {
            Corruption::Masks(cfg) => {
                let (mask, ellipses) = mask::gen_ellipse_mask_with_params(rng, target.height(), target.width(), &cfg.mask)?;
                let out = mask::corrupt_with_mask(target, &mask, cfg.noise_std, rng)?;
                Ok((out, serde_json::json!({ "ellipses": ellipses, "noise_std": cfg.noise_std })))
            }
            Corruption::Occlusion { sprites, cfg } => {
                let (out, placements) = compose_tless_occlusion(target, sprites, rng, cfg)?;
                Ok((out, serde_json::json!({ "occluders": placements })))
            }
        }
    }
}

/// Where target images come from.
#[derive(Debug, Clone)]
pub enum TargetSource {
    Procedural(mnist::ProceduralDigits),
    Images(Arc<Vec<ImageTensor>>),
}

impl TargetSource {
    pub fn len(&self) -> usize {
        match self {
            TargetSource::Procedural(p) => p.len,
            TargetSource::Images(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Result<ImageTensor> {
        match self {
            TargetSource::Procedural(p) => mnist::pad_digit(&p.get(index)),
            TargetSource::Images(v) => v
                .get(index)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("target index {index} out of range"))),
        }
    }
}

/// Raw-data locations and corruption settings for building a generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub dataset: DatasetId,
    pub master_seed: u64,
    /// Raw dataset directory; `None` for FusionMNIST selects procedural digits.
    pub raw_root: Option<PathBuf>,
    pub corruption: CorruptionConfig,
    pub occlusion: OcclusionConfig,
    pub canny: CannyConfig,
    /// Number of procedural digits per split (ignored with raw data).
    pub procedural_train: usize,
    pub procedural_eval: usize,
    /// Optional cap on the number of raw images loaded per split.
    pub limit: Option<usize>,
}

impl DatagenConfig {
    pub fn new(dataset: DatasetId, master_seed: u64) -> Self {
        Self {
            dataset,
            master_seed,
            raw_root: None,
            corruption: CorruptionConfig::default(),
            occlusion: OcclusionConfig::default(),
            canny: CannyConfig::default(),
            procedural_train: 60_000,
            procedural_eval: 10_000,
            limit: None,
        }
    }
}

/// Deterministic sample stream for one split.
#[derive(Debug, Clone)]
pub struct FusionGenerator {
    pub dataset: DatasetId,
    pub split: Split,
    pub master_seed: u64,
    pub source: TargetSource,
    pub corruption: Corruption,
    pub policy: AugmentPolicy,
}

impl FusionGenerator {
    pub fn build(cfg: &DatagenConfig, split: Split) -> Result<Self> {
        let train = split == Split::Train;
        let limit = cfg.limit.unwrap_or(usize::MAX);
        let (source, corruption) = match cfg.dataset {
            DatasetId::FusionMnist => {
                let source = match &cfg.raw_root {
                    None => TargetSource::Procedural(mnist::ProceduralDigits {
                        seed: derive_seed(cfg.master_seed, &[split.stream_id()]),
                        len: if train { cfg.procedural_train } else { cfg.procedural_eval }.min(limit),
                    }),
                    Some(root) => {
                        let name = if train { "train-images-idx3-ubyte" } else { "t10k-images-idx3-ubyte" };
                        let path = [root.join(name), root.join(name.replace("-idx3", ".idx3"))]
                            .into_iter()
                            .find(|p| p.is_file())
                            .ok_or_else(|| Error::config(format!("{name} not found under {}", root.display())))?;
                        let imgs = mnist::read_idx_images(&path)?
                            .iter()
                            .take(limit)
                            .map(mnist::pad_digit)
                            .collect::<Result<Vec<_>>>()?;
                        TargetSource::Images(Arc::new(imgs))
                    }
                };
                (source, Corruption::Masks(cfg.corruption.clone()))
            }
            DatasetId::FusionCeleba => {
                let root = cfg.raw_root.as_ref().ok_or_else(|| Error::config("FusionCelebA needs a raw CelebA directory"))?;
                let imgs = celeba::list_split(root, train)?
                    .iter()
                    .take(limit)
                    .map(|p| celeba::make_celeba_target(&ImageTensor::load(p, 3)?))
                    .collect::<Result<Vec<_>>>()?;
                (TargetSource::Images(Arc::new(imgs)), Corruption::Masks(cfg.corruption.clone()))
            }
            DatasetId::FusionTless => {
                let root = cfg.raw_root.as_ref().ok_or_else(|| Error::config("FusionT-LESS needs a raw T-LESS directory"))?;
                let mut imgs = Vec::new();
                for &class in &tless::TARGET_CLASSES {
                    for (i, p) in tless::class_images(root, class)?.iter().enumerate() {
                        if tless::is_eval_index(i) != train {
                            imgs.push(p.clone());
                        }
                    }
                }
                let imgs = imgs
                    .iter()
                    .take(limit)
                    .map(|p| tless::square_resize(&ImageTensor::load(p, 3)?, tless::TLESS_SIDE))
                    .collect::<Result<Vec<_>>>()?;
                let sprites = tless::build_sprite_set(root, train, &cfg.canny, cfg.limit)?;
                if sprites.is_empty() {
                    return Err(Error::invalid("no occluder sprites could be cut"));
                }
                (
                    TargetSource::Images(Arc::new(imgs)),
                    Corruption::Occlusion { sprites: Arc::new(sprites), cfg: cfg.occlusion.clone() },
                )
            }
        };
        let policy = if train { AugmentPolicy::for_dataset(cfg.dataset) } else { AugmentPolicy::identity() };
        Ok(Self { dataset: cfg.dataset, split, master_seed: cfg.master_seed, source, corruption, policy })
    }

    /// Generator over an in-memory list of targets (tests, Python bindings).
    pub fn from_targets(dataset: DatasetId, split: Split, master_seed: u64, targets: Vec<ImageTensor>, corruption: Corruption) -> Self {
        let policy = if split == Split::Train { AugmentPolicy::for_dataset(dataset) } else { AugmentPolicy::identity() };
        Self { dataset, split, master_seed, source: TargetSource::Images(Arc::new(targets)), corruption, policy }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn sample_seed(&self, index: usize, epoch: u64) -> u64 {
        derive_seed(self.master_seed, &[self.split.stream_id(), index as u64, epoch])
    }

    /// Sample `index` as seen in `epoch`; training epochs re-draw augmentation
    /// and corruption, evaluation samples ignore `epoch`.
    pub fn sample(&self, index: usize, epoch: u64) -> Result<FusionSample> {
        let epoch = if self.split == Split::Eval { 0 } else { epoch };
        let seed = self.sample_seed(index, epoch);
        let mut rng = rng_from(seed, &[]);
        let base = self.source.get(index)?;
        let transform = self.policy.draw(&mut rng);
        let target = transform.apply(&base);
        let mut contexts = Vec::with_capacity(K_MAX);
        let mut params = Vec::with_capacity(K_MAX);
        for slot in 0..K_MAX {
            let mut crng: FvRng = rng_from(seed, &[slot as u64 + 1]);
            let (img, p) = self.corruption.apply(&target, &mut crng)?;
            contexts.push(img);
            params.push(p);
        }
        let meta = SampleMeta {
            seed,
            index,
            dataset: Some(self.dataset),
            transform: (transform != GeometricTransform::default()).then_some(transform),
            context_params: params,
        };
        FusionSample::new(target, contexts, meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_generator_is_deterministic() {
        let mut cfg = DatagenConfig::new(DatasetId::FusionMnist, 42);
        cfg.procedural_train = 16;
        let g = FusionGenerator::build(&cfg, Split::Train).unwrap();
        let a = g.sample(3, 1).unwrap();
        let b = g.sample(3, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.contexts.len(), 3);
        assert_eq!(a.target.shape(), (1, 32, 32));
        // live corruption changes across epochs, the target does not
        let c = g.sample(3, 2).unwrap();
        assert_eq!(a.target, c.target);
        assert_ne!(a.contexts, c.contexts);
    }

    #[test]
    fn contexts_share_target_shape() {
        let cfg = DatagenConfig::new(DatasetId::FusionMnist, 1);
        let g = FusionGenerator::build(&cfg, Split::Eval).unwrap();
        for i in 0..5 {
            let s = g.sample(i, 0).unwrap();
            assert!(s.contexts.iter().all(|c| c.shape() == s.target.shape()));
            assert_eq!(s, g.sample(i, 9).unwrap());
        }
    }

    #[test]
    fn too_many_contexts_rejected() {
        let t = ImageTensor::zeros(1, 2, 2);
        assert!(FusionSample::new(t.clone(), vec![t.clone(); 4], SampleMeta::default()).is_err());
        assert!(FusionSample::new(t.clone(), vec![ImageTensor::zeros(1, 3, 2)], SampleMeta::default()).is_err());
    }
}
