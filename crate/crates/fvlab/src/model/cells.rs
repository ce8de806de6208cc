//! Residual cells and the shared bottom-up encoder.

use std::collections::BTreeMap;

use candle_core::Tensor;

use super::ModelConfig;
use crate::nn::{swish, BatchNorm2d, Conv2d, Mode, ParamStore, SqueezeExcite};
use crate::Result;

/// Encoder cell: BN, swish, 3x3 conv, BN, swish, 3x3 conv, SE, plus the skip.
/// With `stride == 2` the first conv downsamples and the skip is a strided 1x1 conv.
pub struct EncoderCell {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    se: SqueezeExcite,
    skip: Option<Conv2d>,
}

impl EncoderCell {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, stride: usize, cfg: &ModelConfig) -> Result<Self> {
        let hidden = SqueezeExcite::hidden_width(channels, cfg.se_reduction, cfg.se_min_hidden);
        Ok(Self {
            bn1: BatchNorm2d::new(ps, &format!("{name}.bn1"), channels)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), channels, channels, 3, stride, true, false)?,
            bn2: BatchNorm2d::new(ps, &format!("{name}.bn2"), channels)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), channels, channels, 3, 1, true, cfg.zero_init_residual)?,
            se: SqueezeExcite::new(ps, &format!("{name}.se"), channels, hidden)?,
            skip: if stride > 1 { Some(Conv2d::new(ps, &format!("{name}.skip"), channels, channels, 1, stride, true, false)?) } else { None },
        })
    }

    /// Parameter count of one cell, by hand.
    pub fn param_count(channels: usize, stride: usize, cfg: &ModelConfig) -> usize {
        let c = channels;
        let hidden = SqueezeExcite::hidden_width(c, cfg.se_reduction, cfg.se_min_hidden);
        let conv3 = c * c * 9 + c;
        let bn = 2 * c;
        let skip = if stride > 1 { c * c + c } else { 0 };
        2 * bn + 2 * conv3 + SqueezeExcite::num_params(c, hidden) + skip
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.conv1.forward(&swish(&self.bn1.forward(x, mode)?)?)?;
        let h = self.conv2.forward(&swish(&self.bn2.forward(&h, mode)?)?)?;
        let h = self.se.forward(&h)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

/// Decoder cell: BN, 1x1 expand, BN, swish, depthwise kxk, BN, swish, 1x1
/// project, SE, plus the identity skip.
pub struct DecoderCell {
    bn0: BatchNorm2d,
    expand: Conv2d,
    bn1: BatchNorm2d,
    dw: Conv2d,
    bn2: BatchNorm2d,
    project: Conv2d,
    se: SqueezeExcite,
}

impl DecoderCell {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, cfg: &ModelConfig) -> Result<Self> {
        let wide = channels * cfg.expansion;
        let hidden = SqueezeExcite::hidden_width(channels, cfg.se_reduction, cfg.se_min_hidden);
        Ok(Self {
            bn0: BatchNorm2d::new(ps, &format!("{name}.bn0"), channels)?,
            expand: Conv2d::new(ps, &format!("{name}.expand"), channels, wide, 1, 1, true, false)?,
            bn1: BatchNorm2d::new(ps, &format!("{name}.bn1"), wide)?,
            dw: Conv2d::depthwise(ps, &format!("{name}.dw"), wide, cfg.dw_kernel)?,
            bn2: BatchNorm2d::new(ps, &format!("{name}.bn2"), wide)?,
            project: Conv2d::new(ps, &format!("{name}.project"), wide, channels, 1, 1, true, cfg.zero_init_residual)?,
            se: SqueezeExcite::new(ps, &format!("{name}.se"), channels, hidden)?,
        })
    }

    pub fn param_count(channels: usize, cfg: &ModelConfig) -> usize {
        let c = channels;
        let e = c * cfg.expansion;
        let k = cfg.dw_kernel;
        let hidden = SqueezeExcite::hidden_width(c, cfg.se_reduction, cfg.se_min_hidden);
        2 * c + (c * e + e) + 2 * e + (e * k * k + e) + 2 * e + (e * c + c) + SqueezeExcite::num_params(c, hidden)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.expand.forward(&self.bn0.forward(x, mode)?)?;
        let h = self.dw.forward(&swish(&self.bn1.forward(&h, mode)?)?)?;
        let h = self.project.forward(&swish(&self.bn2.forward(&h, mode)?)?)?;
        Ok((x + self.se.forward(&h)?)?)
    }
}

/// Nearest-neighbour x2 upsampling followed by a decoder cell.
pub struct UpCell {
    cell: DecoderCell,
}

impl UpCell {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { cell: DecoderCell::new(ps, name, channels, cfg)? })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.cell.forward(&x.upsample_nearest2d(2 * h, 2 * w)?, mode)
    }
}

/// Output of the bottom-up encoder for a batch of images.
pub struct EncoderOutput {
    /// One feature map per latent group, top-down order, `[N, W, s_l, s_l]`.
    pub groups: Vec<Tensor>,
    /// Last feature map at each spatial side (for skip fusion).
    pub pyramid: BTreeMap<usize, Tensor>,
}

/// Shared residual encoder: stem, downsampling to the finest latent scale,
/// then per-group cells bottom-up with a down cell between scales.
pub struct Encoder {
    stem: Conv2d,
    pre_down: Vec<EncoderCell>,
    pre: Vec<EncoderCell>,
    /// Per scale (bottom-up), per group, the cells of that group.
    group_cells: Vec<Vec<Vec<EncoderCell>>>,
    /// Down cell after each scale except the coarsest.
    between: Vec<EncoderCell>,
}

impl Encoder {
    /// `scales` are `(groups, spatial)` pairs top-down.
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig, scales: &[(usize, usize)]) -> Result<Self> {
        let (c_img, side, _) = cfg.image;
        let w = cfg.width();
        let finest = scales.last().map(|s| s.1).unwrap_or(side);
        let n_down = (side / finest).trailing_zeros() as usize;
        let stem = Conv2d::new(ps, &format!("{name}.stem"), c_img, w, 3, 1, true, false)?;
        let pre_down = (0..n_down).map(|i| EncoderCell::new(ps, &format!("{name}.down{i}"), w, 2, cfg)).collect::<Result<Vec<_>>>()?;
        let pre = (0..cfg.pre_cells).map(|i| EncoderCell::new(ps, &format!("{name}.pre{i}"), w, 1, cfg)).collect::<Result<Vec<_>>>()?;
        let mut group_cells = Vec::new();
        let mut between = Vec::new();
        for (si, &(groups, _)) in scales.iter().rev().enumerate() {
            let per_group = (0..groups)
                .map(|g| {
                    (0..cfg.enc_cells_per_group)
                        .map(|j| EncoderCell::new(ps, &format!("{name}.s{si}.g{g}.cell{j}"), w, 1, cfg))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            group_cells.push(per_group);
            if si + 1 < scales.len() {
                between.push(EncoderCell::new(ps, &format!("{name}.s{si}.down"), w, 2, cfg)?);
            }
        }
        Ok(Self { stem, pre_down, pre, group_cells, between })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<EncoderOutput> {
        let mut pyramid = BTreeMap::new();
        let mut h = self.stem.forward(x)?;
        pyramid.insert(h.dim(2)?, h.clone());
        for cell in &self.pre_down {
            h = cell.forward(&h, mode)?;
            pyramid.insert(h.dim(2)?, h.clone());
        }
        for cell in &self.pre {
            h = cell.forward(&h, mode)?;
        }
        let mut bottom_up = Vec::new();
        for (si, scale) in self.group_cells.iter().enumerate() {
            for cells in scale {
                for cell in cells {
                    h = cell.forward(&h, mode)?;
                }
                bottom_up.push(h.clone());
            }
            pyramid.insert(h.dim(2)?, h.clone());
            if let Some(down) = self.between.get(si) {
                h = down.forward(&h, mode)?;
                pyramid.insert(h.dim(2)?, h.clone());
            }
        }
        bottom_up.reverse();
        Ok(EncoderOutput { groups: bottom_up, pyramid })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn zero_init_cells_are_identity() {
        let cfg = ModelConfig::preset("fmnist-small").unwrap();
        let mut ps = ParamStore::new(Device::Cpu, DType::F64, 1);
        let enc = EncoderCell::new(&mut ps, "e", 4, 1, &cfg).unwrap();
        let dec = DecoderCell::new(&mut ps, "d", 4, &cfg).unwrap();
        let x = crate::rng::Noise::new(1).standard_normal((2, 4, 5, 5), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(vals(&enc.forward(&x, Mode::Train).unwrap()), vals(&x));
        assert_eq!(vals(&dec.forward(&x, Mode::Train).unwrap()), vals(&x));
    }

    #[test]
    fn hand_counted_parameters_on_two_channel_cells() {
        let cfg = ModelConfig { se_reduction: 1, se_min_hidden: 1, expansion: 2, dw_kernel: 3, ..ModelConfig::toy(1) };
        // encoder cell, C = 2, SE hidden 2:
        // bn 2*(2+2)=8, conv3x3 2*(2*2*9+2)=76, se 2*2*2+2+2=12 -> 96
        let mut ps = ParamStore::new(Device::Cpu, DType::F64, 0);
        EncoderCell::new(&mut ps, "e", 2, 1, &cfg).unwrap();
        assert_eq!(ps.num_params(), 96);
        assert_eq!(EncoderCell::param_count(2, 1, &cfg), 96);
        // decoder cell, C = 2, E = 4:
        // bn0 4, expand 2*4+4=12, bn1 8, dw 4*9+4=40, bn2 8, project 4*2+2=10, se 12 -> 94
        let mut ps = ParamStore::new(Device::Cpu, DType::F64, 0);
        DecoderCell::new(&mut ps, "d", 2, &cfg).unwrap();
        assert_eq!(ps.num_params(), 94);
        assert_eq!(DecoderCell::param_count(2, &cfg), 94);
    }

    #[test]
    fn encoder_follows_downsampling_schedule() {
        let cfg = ModelConfig::preset("fmnist-small").unwrap();
        let mut ps = ParamStore::new(Device::Cpu, DType::F32, 0);
        let scales: Vec<(usize, usize)> = cfg.hierarchy.scales.iter().map(|s| (s.groups, s.spatial)).collect();
        let enc = Encoder::new(&mut ps, "enc", &cfg, &scales).unwrap();
        let x = Tensor::zeros((3, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let out = enc.forward(&x, Mode::Eval).unwrap();
        let sides: Vec<usize> = out.groups.iter().map(|g| g.dim(2).unwrap()).collect();
        assert_eq!(sides, cfg.hierarchy.group_spatial());
        assert_eq!(out.pyramid.keys().copied().collect::<Vec<_>>(), vec![4, 8, 16, 32]);
        for g in &out.groups {
            assert_eq!(g.dims()[..2], [3, cfg.width()]);
        }
    }
}
