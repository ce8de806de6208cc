use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetId;
use crate::{Error, Result};

/// How context features (and, below the top group, the decoder feature) are
/// fused into the prior of each latent group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PriorMode {
    MaxAggAdd,
    MeanAggAdd,
    BayAggAdd,
    MaxAggAll,
    MeanAggAll,
    BayAggAll,
}

impl PriorMode {
    pub const ALL: [PriorMode; 6] =
        [Self::MaxAggAdd, Self::MeanAggAdd, Self::BayAggAdd, Self::MaxAggAll, Self::MeanAggAll, Self::BayAggAll];

    pub fn name(self) -> &'static str {
        match self {
            Self::MaxAggAdd => "MaxAggAdd",
            Self::MeanAggAdd => "MeanAggAdd",
            Self::BayAggAdd => "BayAggAdd",
            Self::MaxAggAll => "MaxAggAll",
            Self::MeanAggAll => "MeanAggAll",
            Self::BayAggAll => "BayAggAll",
        }
    }

    pub fn is_bayesian(self) -> bool {
        matches!(self, Self::BayAggAdd | Self::BayAggAll)
    }

    /// Decoder feature joins the aggregation set instead of being added.
    pub fn joins_set(self) -> bool {
        matches!(self, Self::MaxAggAll | Self::MeanAggAll | Self::BayAggAll)
    }

    pub fn uses_mean(self) -> bool {
        matches!(self, Self::MeanAggAdd | Self::MeanAggAll)
    }
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown prior mode {s:?}")))
    }
}

/// Which inputs condition the approximate posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosteriorVariant {
    /// Target features and decoder features only.
    Y,
    /// Additionally the aggregated context features.
    XY,
}

impl PosteriorVariant {
    pub const ALL: [PosteriorVariant; 2] = [Self::Y, Self::XY];

    pub fn name(self) -> &'static str {
        match self {
            Self::Y => "q(y)",
            Self::XY => "q(x,y)",
        }
    }
}

impl FromStr for PosteriorVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(' ', "").as_str() {
            "y" | "q(y)" => Ok(Self::Y),
            "xy" | "q(x,y)" => Ok(Self::XY),
            _ => Err(Error::config(format!("unknown posterior variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LikelihoodKind {
    Bernoulli,
    LogisticMixture { components: usize },
}

impl LikelihoodKind {
    /// Decoder output channels for images with `channels` channels.
    pub fn output_channels(self, channels: usize) -> usize {
        match self {
            Self::Bernoulli => channels,
            // logits + per-channel means and log-scales (+ coupling coefficients for RGB)
            Self::LogisticMixture { components } => {
                let coeffs = channels * (channels - 1) / 2;
                components * (1 + 2 * channels + coeffs)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub groups: usize,
    /// Side length of the square latent maps at this scale.
    pub spatial: usize,
}

/// Latent layout, top (coarsest) scale first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub scales: Vec<ScaleSpec>,
    pub latent_channels: usize,
    pub base_width: usize,
}

impl HierarchySpec {
    pub fn num_groups(&self) -> usize {
        self.scales.iter().map(|s| s.groups).sum()
    }

    /// Spatial side of each group in top-down order.
    pub fn group_spatial(&self) -> Vec<usize> {
        self.scales.iter().flat_map(|s| std::iter::repeat_n(s.spatial, s.groups)).collect()
    }

    /// Number of latent scalars per group.
    pub fn group_sizes(&self) -> Vec<usize> {
        self.group_spatial().into_iter().map(|s| s * s * self.latent_channels).collect()
    }

    pub fn validate(&self, image_side: usize) -> Result<()> {
        if self.scales.is_empty() || self.num_groups() == 0 {
            return Err(Error::config("hierarchy needs at least one latent group"));
        }
        if self.latent_channels == 0 || self.base_width == 0 {
            return Err(Error::config("latent channels and width must be positive"));
        }
        if self.scales.iter().any(|s| s.groups == 0 || s.spatial == 0) {
            return Err(Error::config("every scale needs at least one group and a positive size"));
        }
        for w in self.scales.windows(2) {
            if w[1].spatial != 2 * w[0].spatial {
                return Err(Error::config("latent spatial size must double between scales"));
            }
        }
        let finest = self.scales.last().unwrap().spatial;
        if image_side % finest != 0 || !(image_side / finest).is_power_of_two() {
            return Err(Error::config(format!("image side {image_side} is not a power-of-two multiple of {finest}")));
        }
        Ok(())
    }
}

/// Full network description shared by the hierarchical model and the CVAE baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (channels, height, width); images are square.
    pub image: (usize, usize, usize),
    pub hierarchy: HierarchySpec,
    pub likelihood: LikelihoodKind,
    pub prior_mode: PriorMode,
    pub posterior: PosteriorVariant,
    pub share_encoder: bool,
    /// Max-fuse aggregated encoder features into the decoder at every resolution.
    pub skip_fuse: bool,
    pub enc_cells_per_group: usize,
    pub dec_cells_per_group: usize,
    pub pre_cells: usize,
    pub post_cells: usize,
    pub head_kernel: usize,
    pub dw_kernel: usize,
    pub expansion: usize,
    pub se_reduction: usize,
    pub se_min_hidden: usize,
    pub zero_init_residual: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image;
        if !(c == 1 || c == 3) || h != w {
            return Err(Error::config(format!("unsupported image shape {:?}", self.image)));
        }
        self.hierarchy.validate(h)?;
        if self.head_kernel % 2 == 0 || self.dw_kernel % 2 == 0 {
            return Err(Error::config("kernel sizes must be odd"));
        }
        if self.expansion == 0 {
            return Err(Error::config("expansion must be positive"));
        }
        if let LikelihoodKind::LogisticMixture { components } = self.likelihood {
            if components == 0 {
                return Err(Error::config("mixture needs at least one component"));
            }
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.hierarchy.num_groups()
    }

    pub fn width(&self) -> usize {
        self.hierarchy.base_width
    }

    fn base(image: (usize, usize, usize), hierarchy: HierarchySpec, likelihood: LikelihoodKind) -> Self {
        Self {
            image,
            hierarchy,
            likelihood,
            prior_mode: PriorMode::MaxAggAdd,
            posterior: PosteriorVariant::Y,
            share_encoder: true,
            skip_fuse: false,
            enc_cells_per_group: 1,
            dec_cells_per_group: 1,
            pre_cells: 0,
            post_cells: 0,
            head_kernel: 3,
            dw_kernel: 3,
            expansion: 2,
            se_reduction: 8,
            se_min_hidden: 4,
            zero_init_residual: true,
        }
    }

    /// Named preset. Desk-scale presets end in `-small`; the others follow the
    /// published group layout and are meant for accelerators.
    pub fn preset(name: &str) -> Result<Self> {
        let scales = |v: &[(usize, usize)]| v.iter().map(|&(groups, spatial)| ScaleSpec { groups, spatial }).collect();
        let mix = LikelihoodKind::LogisticMixture { components: 10 };
        let cfg = match name {
            "fmnist-small" => Self::base(
                (1, 32, 32),
                HierarchySpec { scales: scales(&[(5, 4), (2, 8)]), latent_channels: 10, base_width: 16 },
                LikelihoodKind::Bernoulli,
            ),
            "fceleba-small" => Self::base(
                (3, 64, 64),
                HierarchySpec { scales: scales(&[(2, 8), (1, 16)]), latent_channels: 8, base_width: 24 },
                mix,
            ),
            "ftless-small" => Self::base(
                (3, 64, 64),
                HierarchySpec { scales: scales(&[(2, 8), (1, 16)]), latent_channels: 8, base_width: 24 },
                LikelihoodKind::Bernoulli,
            ),
            "fmnist" => Self {
                enc_cells_per_group: 2,
                dec_cells_per_group: 2,
                pre_cells: 1,
                post_cells: 1,
                dw_kernel: 5,
                expansion: 3,
                ..Self::base(
                    (1, 32, 32),
                    HierarchySpec { scales: scales(&[(5, 4), (2, 8)]), latent_channels: 10, base_width: 64 },
                    LikelihoodKind::Bernoulli,
                )
            },
            "fceleba" | "ftless" => Self {
                enc_cells_per_group: 2,
                dec_cells_per_group: 2,
                pre_cells: 1,
                post_cells: 1,
                dw_kernel: 5,
                expansion: 3,
                ..Self::base(
                    (3, 64, 64),
                    HierarchySpec { scales: scales(&[(10, 8), (5, 16), (2, 32)]), latent_channels: 20, base_width: 64 },
                    if name == "fceleba" { mix } else { LikelihoodKind::Bernoulli },
                )
            },
            _ => return Err(Error::config(format!("unknown preset {name:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub const PRESETS: [&'static str; 6] = ["fmnist-small", "fceleba-small", "ftless-small", "fmnist", "fceleba", "ftless"];

    pub fn default_preset(dataset: DatasetId) -> &'static str {
        match dataset {
            DatasetId::FusionMnist => "fmnist-small",
            DatasetId::FusionCeleba => "fceleba-small",
            DatasetId::FusionTless => "ftless-small",
        }
    }

    /// Tiny double-precision-friendly configuration used by gradient checks:
    /// one 4x4 scale with `groups` groups on a 1x4x4 image.
    pub fn toy(groups: usize) -> Self {
        Self {
            head_kernel: 1,
            se_reduction: 1,
            se_min_hidden: 1,
            expansion: 1,
            zero_init_residual: false,
            ..Self::base(
                (1, 4, 4),
                HierarchySpec { scales: vec![ScaleSpec { groups, spatial: 4 }], latent_channels: 1, base_width: 1 },
                LikelihoodKind::Bernoulli,
            )
        }
    }
}
