//! Comparison architectures: a single-level CVAE and a deterministic fully
//! convolutional network, each with an optional max-fused shortcut variant.
//! Widths are searched so every baseline lands within 10% of the parameter
//! count of the hierarchical model it is compared against.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::aggregation::max_agg_stacked;
use crate::model::cells::{DecoderCell, Encoder, UpCell};
use crate::model::{skip_fuse, Batch, FusionModel, FusionVae, HierarchySpec, ModelConfig, ModelKind, PosteriorVariant, PriorMode, ScaleSpec};
use crate::nn::{sigmoid, swish, BatchNorm2d, Conv2d, Init, Mode, ParamStore};
use crate::objective::LossBreakdown;
use crate::rng::Noise;
use crate::{Error, Result};

pub const PARAM_TOLERANCE: f64 = 0.10;

/// A resolved baseline architecture and how it compares with its reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: usize,
    pub reference_params: usize,
}

impl BaselineSpec {
    pub fn ratio(&self) -> f64 {
        self.params as f64 / self.reference_params as f64
    }
}

/// Baseline layout at a given width: one group at the coarsest latent scale,
/// with as many cells as the reference spreads over all its groups.
pub fn baseline_config(kind: ModelKind, reference: &ModelConfig, width: usize) -> ModelConfig {
    let l = reference.num_groups();
    let coarsest = reference.hierarchy.scales[0].spatial;
    ModelConfig {
        hierarchy: HierarchySpec {
            scales: vec![ScaleSpec { groups: 1, spatial: coarsest }],
            latent_channels: reference.hierarchy.latent_channels,
            base_width: width,
        },
        prior_mode: PriorMode::MaxAggAdd,
        posterior: PosteriorVariant::Y,
        skip_fuse: kind.uses_skips(),
        enc_cells_per_group: reference.enc_cells_per_group * l,
        dec_cells_per_group: reference.dec_cells_per_group * l,
        ..reference.clone()
    }
}

/// Builds any architecture with the given configuration.
pub fn build_model(kind: ModelKind, cfg: ModelConfig, device: &Device, dtype: DType, seed: u64) -> Result<Box<dyn FusionModel>> {
    Ok(match kind {
        ModelKind::FusionVae | ModelKind::Cvae | ModelKind::CvaeS => {
            if kind != ModelKind::FusionVae && (cfg.num_groups() != 1 || cfg.skip_fuse != kind.uses_skips()) {
                return Err(Error::config(format!("{kind} needs a single latent group and matching skip policy")));
            }
            Box::new(FusionVae::with_kind(cfg, kind, device, dtype, seed)?)
        }
        ModelKind::Fcn | ModelKind::FcnS => Box::new(Fcn::new(cfg, kind, device, dtype, seed)?),
    })
}

pub fn count_params(kind: ModelKind, cfg: &ModelConfig) -> Result<usize> {
    Ok(build_model(kind, cfg.clone(), &Device::Cpu, DType::F32, 0)?.num_params())
}

/// Finds the baseline width whose parameter count is closest to the reference
/// model's, and fails if that is still outside the tolerance.
pub fn match_baseline(kind: ModelKind, reference: &ModelConfig) -> Result<BaselineSpec> {
    let reference_params = count_params(ModelKind::FusionVae, reference)?;
    if kind == ModelKind::FusionVae {
        return Ok(BaselineSpec { kind, config: reference.clone(), params: reference_params, reference_params });
    }
    let at = |w: usize| -> Result<usize> { count_params(kind, &baseline_config(kind, reference, w)) };
    // parameter count grows monotonically with width
    let (mut lo, mut hi) = (1usize, 4 * reference.width());
    while at(hi)? < reference_params {
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if at(mid)? < reference_params {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (p_lo, p_hi) = (at(lo)?, at(hi)?);
    let (width, params) = if reference_params - p_lo.min(reference_params) <= p_hi - reference_params { (lo, p_lo) } else { (hi, p_hi) };
    let spec = BaselineSpec { kind, config: baseline_config(kind, reference, width), params, reference_params };
    if (spec.ratio() - 1.0).abs() > PARAM_TOLERANCE {
        return Err(Error::config(format!(
            "{kind}: closest width {width} gives {params} parameters vs {reference_params} ({:.1}%)",
            100.0 * (spec.ratio() - 1.0)
        )));
    }
    Ok(spec)
}

/// Deterministic encoder/decoder: contexts are encoded by a shared encoder,
/// max-aggregated at the bottleneck, and decoded to a single image.
pub struct Fcn {
    cfg: ModelConfig,
    kind: ModelKind,
    ps: ParamStore,
    encoder: Encoder,
    /// Bottleneck input when no context is given.
    empty: Tensor,
    cells: Vec<DecoderCell>,
    ups: Vec<UpCell>,
    post: Vec<DecoderCell>,
    out_bn: BatchNorm2d,
    out_conv: Conv2d,
}

impl Fcn {
    pub fn new(cfg: ModelConfig, kind: ModelKind, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !matches!(kind, ModelKind::Fcn | ModelKind::FcnS) || cfg.skip_fuse != kind.uses_skips() {
            return Err(Error::config(format!("{kind} is not a deterministic baseline with matching skip policy")));
        }
        let mut ps = ParamStore::new(device.clone(), dtype, seed);
        let w = cfg.width();
        let s = cfg.hierarchy.scales[0].spatial;
        let encoder = Encoder::new(&mut ps, "enc", &cfg, &[(1, s)])?;
        let empty = ps.param("dec.empty", (1, w, s, s), Init::Zeros)?;
        let cells = (0..cfg.dec_cells_per_group).map(|i| DecoderCell::new(&mut ps, &format!("dec.cell{i}"), w, &cfg)).collect::<Result<Vec<_>>>()?;
        let n_up = (cfg.image.1 / s).trailing_zeros() as usize;
        let ups = (0..n_up).map(|i| UpCell::new(&mut ps, &format!("dec.up{i}"), w, &cfg)).collect::<Result<Vec<_>>>()?;
        let post = (0..cfg.post_cells).map(|i| DecoderCell::new(&mut ps, &format!("dec.post{i}"), w, &cfg)).collect::<Result<Vec<_>>>()?;
        let out_bn = BatchNorm2d::new(&mut ps, "dec.out.bn", w)?;
        let out_conv = Conv2d::new(&mut ps, "dec.out.conv", w, cfg.image.0, 3, 1, true, false)?;
        Ok(Self { cfg, kind, ps, encoder, empty, cells, ups, post, out_bn, out_conv })
    }

    /// Prediction in [0, 1], `[B, C, H, W]`.
    pub fn forward(&self, contexts: &[Tensor], batch: usize, mode: Mode) -> Result<Tensor> {
        let k = contexts.len();
        let (mut d, pyramid) = if k == 0 {
            let (_, w, s, _) = self.empty.dims4()?;
            (self.empty.broadcast_as((batch, w, s, s))?.contiguous()?, None)
        } else {
            let stacked = Tensor::cat(contexts, 0)?.to_dtype(self.ps.dtype())?;
            let out = self.encoder.forward(&stacked, mode)?;
            let split = |t: &Tensor| -> Result<Tensor> {
                let (_, c, h, w) = t.dims4()?;
                Ok(t.reshape((k, batch, c, h, w))?)
            };
            let bottleneck = max_agg_stacked(&split(&out.groups[0])?)?;
            let pyramid = if self.cfg.skip_fuse {
                Some(out.pyramid.iter().map(|(s, t)| Ok((*s, max_agg_stacked(&split(t)?)?))).collect::<Result<std::collections::BTreeMap<_, _>>>()?)
            } else {
                None
            };
            (bottleneck, pyramid)
        };
        let fuse = |d: Tensor| -> Result<Tensor> {
            match pyramid.as_ref().and_then(|p| p.get(&d.dim(2).unwrap_or(0))) {
                Some(f) => skip_fuse(f, &d),
                None => Ok(d),
            }
        };
        for cell in &self.cells {
            d = cell.forward(&d, mode)?;
        }
        d = fuse(d)?;
        for up in &self.ups {
            d = fuse(up.forward(&d, mode)?)?;
        }
        for cell in &self.post {
            d = cell.forward(&d, mode)?;
        }
        sigmoid(&self.out_conv.forward(&swish(&self.out_bn.forward(&d, mode)?)?)?)
    }
}

impl FusionModel for Fcn {
    fn kind(&self) -> ModelKind {
        self.kind
    }

    fn store(&self) -> &ParamStore {
        &self.ps
    }

    fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn group_sizes(&self) -> Vec<usize> {
        Vec::new()
    }

    /// Per-sample sum of squared errors, averaged over the batch.
    fn train_loss(&self, batch: &Batch, _beta: f64, _alpha: &[f64], _noise: &mut Noise, mode: Mode) -> Result<(Tensor, LossBreakdown)> {
        let b = batch.batch_size()?;
        let pred = self.forward(&batch.contexts, b, mode)?;
        let y = batch.target.to_dtype(self.ps.dtype())?;
        let sse = (pred - y)?.sqr()?.flatten_from(1)?.sum(1)?;
        let loss = sse.mean_all()?;
        let total = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        Ok((loss, LossBreakdown { recon_ll: -total, kl_per_group: Vec::new(), beta: 0.0, alpha: Vec::new(), total }))
    }

    /// Every sample is the same prediction.
    fn sample(&self, contexts: &[Tensor], batch: usize, n: usize, _temperature: f64, _noise: &mut Noise) -> Result<Vec<Tensor>> {
        if n == 0 {
            return Err(Error::invalid("at least one sample"));
        }
        let pred = self.forward(contexts, batch, Mode::Eval)?.detach();
        Ok(vec![pred; n])
    }

    fn log_importance_weights(&self, _batch: &Batch, _samples: usize, _noise: &mut Noise) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    fn small_ref() -> ModelConfig {
        ModelConfig { hierarchy: HierarchySpec { base_width: 8, ..ModelConfig::preset("fmnist-small").unwrap().hierarchy }, ..ModelConfig::preset("fmnist-small").unwrap() }
    }

    fn images(b: usize, seed: u64) -> Tensor {
        let mut n = Noise::new(seed);
        sigmoid(&n.standard_normal((b, 1, 32, 32), DType::F32, &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn baselines_are_parameter_matched() {
        let r = small_ref();
        for kind in [ModelKind::Cvae, ModelKind::CvaeS, ModelKind::Fcn, ModelKind::FcnS] {
            let spec = match_baseline(kind, &r).unwrap();
            assert!((spec.ratio() - 1.0).abs() <= PARAM_TOLERANCE, "{kind}: {}", spec.ratio());
            assert_eq!(spec.params, count_params(kind, &spec.config).unwrap());
        }
    }

    #[test]
    fn fcn_duplicate_contexts_match_single() {
        let cfg = baseline_config(ModelKind::FcnS, &small_ref(), 6);
        // f64: the encoder runs on a larger stacked batch, and the matmul
        // blocking changes with batch size, so only round-off may differ
        let m = Fcn::new(cfg, ModelKind::FcnS, &Device::Cpu, DType::F64, 1).unwrap();
        m.store().randomize(0.3, 2).unwrap();
        let x = images(2, 3).to_dtype(DType::F64).unwrap();
        let one = m.forward(&[x.clone()], 2, Mode::Eval).unwrap();
        let three = m.forward(&[x.clone(), x.clone(), x], 2, Mode::Eval).unwrap();
        let d = vals(&one).iter().zip(vals(&three)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn fcn_is_deterministic_and_permutation_invariant() {
        let cfg = baseline_config(ModelKind::FcnS, &small_ref(), 6);
        let m = Fcn::new(cfg, ModelKind::FcnS, &Device::Cpu, DType::F32, 4).unwrap();
        m.store().randomize(0.3, 5).unwrap();
        let (a, b) = (images(2, 6), images(2, 7));
        let p1 = m.forward(&[a.clone(), b.clone()], 2, Mode::Eval).unwrap();
        let p2 = m.forward(&[b, a], 2, Mode::Eval).unwrap();
        assert_eq!(vals(&p1), vals(&p2));
        let s = m.sample(&[], 2, 3, 1.0, &mut Noise::new(0)).unwrap();
        assert_eq!(vals(&s[0]), vals(&s[2]));
        assert_eq!(s[0].dims(), &[2, 1, 32, 32]);
    }

    #[test]
    fn cvae_top_prior_without_contexts_is_standard_normal() {
        let cfg = baseline_config(ModelKind::Cvae, &small_ref(), 6);
        let m = FusionVae::with_kind(cfg, ModelKind::Cvae, &Device::Cpu, DType::F32, 0).unwrap();
        let p = m.prior_head(0, None, None, 2).unwrap();
        assert!(vals(&p.mu).iter().all(|&v| v == 0.0) && vals(&p.var).iter().all(|&v| v == 1.0));
        assert_eq!(m.group_sizes().len(), 1);
    }

    #[test]
    fn cvae_prior_is_permutation_invariant() {
        let cfg = baseline_config(ModelKind::CvaeS, &small_ref(), 6);
        let m = FusionVae::with_kind(cfg, ModelKind::CvaeS, &Device::Cpu, DType::F32, 0).unwrap();
        m.store().randomize(0.3, 9).unwrap();
        let (a, b, c) = (images(2, 10), images(2, 11), images(2, 12));
        let z = vec![Noise::new(1).standard_normal((2, 10, 4, 4), DType::F32, &Device::Cpu).unwrap()];
        let p1 = m.priors_given(&[a.clone(), b.clone(), c.clone()], &z, 2, Mode::Eval).unwrap();
        let p2 = m.priors_given(&[c, a, b], &z, 2, Mode::Eval).unwrap();
        assert_eq!(vals(&p1[0].mu), vals(&p2[0].mu));
    }

    #[test]
    fn mismatched_skip_policy_is_rejected() {
        let cfg = baseline_config(ModelKind::Fcn, &small_ref(), 6);
        assert!(Fcn::new(cfg.clone(), ModelKind::FcnS, &Device::Cpu, DType::F32, 0).is_err());
        assert!(build_model(ModelKind::CvaeS, cfg, &Device::Cpu, DType::F32, 0).is_err());
    }
}
