//! The hierarchical conditional VAE: shared encoder, per-group prior and
//! posterior heads, and a top-down generator seeded by a trainable tensor `h`.

use candle_core::{DType, Device, Tensor};

use super::cells::{DecoderCell, Encoder, EncoderOutput, UpCell};
use super::{Batch, FusionModel, ModelConfig, ModelKind, PosteriorVariant};
use crate::aggregation::{bayes_agg_stacked, max_agg_stacked, mean_agg_stacked, GaussianFeature};
use crate::nn::{swish, BatchNorm2d, Conv2d, Init, Mode, ParamStore};
use crate::objective::{fusionvae_elbo, gaussian_kl, LikelihoodParams, LossBreakdown};
use crate::rng::Noise;
use crate::{Error, Result};

/// Context features stacked along a leading set dimension.
pub struct ContextFeatures {
    pub k: usize,
    /// Per group, `[K, B, W, s, s]`.
    pub groups: Vec<Tensor>,
    /// Per spatial side, `[K, B, W, s, s]`.
    pub pyramid: std::collections::BTreeMap<usize, Tensor>,
}

impl ContextFeatures {
    fn from_encoder(out: EncoderOutput, k: usize, b: usize) -> Result<Self> {
        let split = |t: Tensor| -> Result<Tensor> {
            let (_, c, h, w) = t.dims4()?;
            Ok(t.reshape((k, b, c, h, w))?)
        };
        Ok(Self {
            k,
            groups: out.groups.into_iter().map(split).collect::<Result<_>>()?,
            pyramid: out.pyramid.into_iter().map(|(s, t)| split(t).map(|t| (s, t))).collect::<Result<_>>()?,
        })
    }

    /// Tiles every feature `n` times along the batch dimension.
    fn tile(&self, n: usize) -> Result<Self> {
        let rep = |t: &Tensor| -> Result<Tensor> { Ok(t.repeat((1, n, 1, 1, 1))?) };
        Ok(Self {
            k: self.k,
            groups: self.groups.iter().map(rep).collect::<Result<_>>()?,
            pyramid: self.pyramid.iter().map(|(s, t)| rep(t).map(|t| (*s, t))).collect::<Result<_>>()?,
        })
    }
}

fn tile_target(groups: &[Tensor], n: usize) -> Result<Vec<Tensor>> {
    groups.iter().map(|t| Ok(t.repeat((n, 1, 1, 1))?)).collect()
}

/// Source of the latent sample at every group.
pub enum Latents<'a> {
    Posterior,
    Prior { temperature: f64 },
    Given(&'a [Tensor]),
}

/// Per-group distributions and samples from one generator pass.
pub struct GroupState {
    pub prior: GaussianFeature,
    pub posterior: Option<GaussianFeature>,
    pub z: Tensor,
}

pub struct Pass {
    pub likelihood: LikelihoodParams,
    pub groups: Vec<GroupState>,
}

pub struct FusionVae {
    cfg: ModelConfig,
    kind: ModelKind,
    ps: ParamStore,
    encoder: Encoder,
    target_encoder: Option<Encoder>,
    h: Tensor,
    prior_heads: Vec<Conv2d>,
    posterior_heads: Vec<Conv2d>,
    combiners: Vec<Conv2d>,
    group_cells: Vec<Vec<DecoderCell>>,
    /// Upsampling in front of group `l` when its scale is finer than group `l - 1`'s.
    group_ups: Vec<Option<UpCell>>,
    tail_ups: Vec<UpCell>,
    post: Vec<DecoderCell>,
    out_bn: BatchNorm2d,
    out_conv: Conv2d,
    spatial: Vec<usize>,
}

impl FusionVae {
    pub fn new(cfg: ModelConfig, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        Self::with_kind(cfg, ModelKind::FusionVae, device, dtype, seed)
    }

    /// Builds the network; `kind` only tags baselines that reuse this architecture.
    pub fn with_kind(cfg: ModelConfig, kind: ModelKind, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(device.clone(), dtype, seed);
        let scales: Vec<(usize, usize)> = cfg.hierarchy.scales.iter().map(|s| (s.groups, s.spatial)).collect();
        let encoder = Encoder::new(&mut ps, "enc", &cfg, &scales)?;
        let target_encoder = if cfg.share_encoder { None } else { Some(Encoder::new(&mut ps, "enc_target", &cfg, &scales)?) };
        let w = cfg.width();
        let zc = cfg.hierarchy.latent_channels;
        let spatial = cfg.hierarchy.group_spatial();
        let h = ps.param("gen.h", (1, w, spatial[0], spatial[0]), Init::Normal(1.0))?;
        let l = spatial.len();
        let mut prior_heads = Vec::with_capacity(l);
        let mut posterior_heads = Vec::with_capacity(l);
        let mut combiners = Vec::with_capacity(l);
        let mut group_cells = Vec::with_capacity(l);
        let mut group_ups = Vec::with_capacity(l);
        for g in 0..l {
            prior_heads.push(Conv2d::new(&mut ps, &format!("prior.g{g}"), w, 2 * zc, cfg.head_kernel, 1, true, false)?);
            posterior_heads.push(Conv2d::new(&mut ps, &format!("post.g{g}"), w, 2 * zc, cfg.head_kernel, 1, true, false)?);
            combiners.push(Conv2d::new(&mut ps, &format!("gen.g{g}.combine"), w + zc, w, 1, 1, true, false)?);
            group_cells.push(
                (0..cfg.dec_cells_per_group)
                    .map(|j| DecoderCell::new(&mut ps, &format!("gen.g{g}.cell{j}"), w, &cfg))
                    .collect::<Result<Vec<_>>>()?,
            );
            group_ups.push(if g > 0 && spatial[g] != spatial[g - 1] { Some(UpCell::new(&mut ps, &format!("gen.g{g}.up"), w, &cfg)?) } else { None });
        }
        let n_tail = (cfg.image.1 / spatial[l - 1]).trailing_zeros() as usize;
        let tail_ups = (0..n_tail).map(|i| UpCell::new(&mut ps, &format!("gen.tail{i}"), w, &cfg)).collect::<Result<Vec<_>>>()?;
        let post = (0..cfg.post_cells).map(|i| DecoderCell::new(&mut ps, &format!("gen.post{i}"), w, &cfg)).collect::<Result<Vec<_>>>()?;
        let out_bn = BatchNorm2d::new(&mut ps, "gen.out.bn", w)?;
        let out_ch = cfg.likelihood.output_channels(cfg.image.0);
        let out_conv = Conv2d::new(&mut ps, "gen.out.conv", w, out_ch, 3, 1, true, false)?;
        Ok(Self {
            cfg,
            kind,
            ps,
            encoder,
            target_encoder,
            h,
            prior_heads,
            posterior_heads,
            combiners,
            group_cells,
            group_ups,
            tail_ups,
            post,
            out_bn,
            out_conv,
            spatial,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn generator_seed(&self) -> &Tensor {
        &self.h
    }

    fn check_images(&self, images: &[&Tensor]) -> Result<usize> {
        let (c, h, w) = self.cfg.image;
        let mut b = None;
        for t in images {
            let (tb, tc, th, tw) = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape(format!("image batch {:?} vs model input {:?}", t.dims(), self.cfg.image)));
            }
            if *b.get_or_insert(tb) != tb {
                return Err(Error::shape("contexts and target disagree on batch size"));
            }
        }
        Ok(b.unwrap_or(0))
    }

    /// Runs the shared encoder over all contexts and (optionally) the target.
    /// An empty context set yields `None` without any computation.
    pub fn encode(&self, contexts: &[Tensor], target: Option<&Tensor>, mode: Mode) -> Result<(Option<ContextFeatures>, Option<Vec<Tensor>>)> {
        let mut all: Vec<&Tensor> = contexts.iter().collect();
        all.extend(target);
        let b = self.check_images(&all)?;
        let k = contexts.len();
        match (&self.target_encoder, k, target) {
            (_, 0, None) => Ok((None, None)),
            (None, _, _) => {
                let stacked = Tensor::cat(&all, 0)?;
                let out = self.encoder.forward(&stacked, mode)?;
                let tgt = match target {
                    Some(_) => Some(out.groups.iter().map(|g| g.narrow(0, k * b, b)).collect::<candle_core::Result<Vec<_>>>()?),
                    None => None,
                };
                let ctx = if k > 0 {
                    let groups = out.groups.iter().map(|g| g.narrow(0, 0, k * b)).collect::<candle_core::Result<Vec<_>>>()?;
                    let pyramid = out.pyramid.iter().map(|(s, t)| t.narrow(0, 0, k * b).map(|t| (*s, t))).collect::<candle_core::Result<_>>()?;
                    Some(ContextFeatures::from_encoder(EncoderOutput { groups, pyramid }, k, b)?)
                } else {
                    None
                };
                Ok((ctx, tgt))
            }
            (Some(te), _, _) => {
                let ctx = if k > 0 {
                    Some(ContextFeatures::from_encoder(self.encoder.forward(&Tensor::cat(contexts, 0)?, mode)?, k, b)?)
                } else {
                    None
                };
                let tgt = match target {
                    Some(y) => Some(te.forward(y, mode)?.groups),
                    None => None,
                };
                Ok((ctx, tgt))
            }
        }
    }

    fn split_head(&self, out: &Tensor) -> Result<GaussianFeature> {
        let zc = self.cfg.hierarchy.latent_channels;
        let dim = out.rank() - 3;
        let mu = out.narrow(dim, 0, zc)?;
        let logvar = out.narrow(dim, zc, zc)?;
        GaussianFeature::from_logvar(mu, &logvar)
    }

    fn head_on_set(&self, head: &Conv2d, set: &Tensor) -> Result<Tensor> {
        let (k, b, c, h, w) = set.dims5()?;
        let out = head.forward(&set.reshape((k * b, c, h, w))?)?;
        let (_, oc, oh, ow) = out.dims4()?;
        Ok(out.reshape((k, b, oc, oh, ow))?)
    }

    fn aggregate(&self, set: &Tensor) -> Result<Tensor> {
        if self.cfg.prior_mode.uses_mean() {
            mean_agg_stacked(set)
        } else {
            max_agg_stacked(set)
        }
    }

    /// Prior of group `l` from the stacked context features of that group and
    /// the decoder feature (absent for the top group).
    pub fn prior_head(&self, l: usize, ctx: Option<&Tensor>, d: Option<&Tensor>, batch: usize) -> Result<GaussianFeature> {
        let mode = self.cfg.prior_mode;
        let head = &self.prior_heads[l];
        let k = match ctx {
            Some(c) => c.dim(0)?,
            None => 0,
        };
        let s = self.spatial[l];
        if k == 0 && d.is_none() {
            let zc = self.cfg.hierarchy.latent_channels;
            return GaussianFeature::standard_normal((batch, zc, s, s), self.ps.dtype(), self.ps.device());
        }
        if mode.is_bayesian() {
            // convolutions run per member before the fusion
            let mut outs = Vec::new();
            if let Some(c) = ctx.filter(|_| k > 0) {
                let input = match (d, mode.joins_set()) {
                    (Some(d), false) => c.broadcast_add(&d.unsqueeze(0)?)?,
                    _ => c.clone(),
                };
                outs.push(self.head_on_set(head, &input)?);
            }
            if let Some(d) = d {
                if k == 0 || mode.joins_set() {
                    outs.push(head.forward(d)?.unsqueeze(0)?);
                }
            }
            let g = self.split_head(&Tensor::cat(&outs, 0)?)?;
            return bayes_agg_stacked(None, &g.mu, &g.var);
        }
        let input = match (ctx.filter(|_| k > 0), d) {
            (None, Some(d)) => d.clone(),
            (Some(c), None) => self.aggregate(c)?,
            (Some(c), Some(d)) if mode.joins_set() => self.aggregate(&Tensor::cat(&[c, &d.unsqueeze(0)?], 0)?)?,
            (Some(c), Some(d)) => (self.aggregate(c)? + d)?,
            (None, None) => unreachable!(),
        };
        self.split_head(&head.forward(&input)?)
    }

    /// Approximate posterior of group `l`.
    pub fn posterior_head(&self, l: usize, f_y: &Tensor, ctx: Option<&Tensor>, d: Option<&Tensor>) -> Result<GaussianFeature> {
        let mut input = f_y.clone();
        if self.cfg.posterior == PosteriorVariant::XY {
            if let Some(c) = ctx.filter(|c| c.dim(0).map(|k| k > 0).unwrap_or(false)) {
                input = (input + self.aggregate(c)?)?;
            }
        }
        if let Some(d) = d {
            input = (input + d)?;
        }
        self.split_head(&self.posterior_heads[l].forward(&input)?)
    }

    fn skip(&self, d: Tensor, ctx: Option<&ContextFeatures>) -> Result<Tensor> {
        if !self.cfg.skip_fuse {
            return Ok(d);
        }
        let Some(ctx) = ctx else { return Ok(d) };
        match ctx.pyramid.get(&d.dim(2)?) {
            Some(f) => skip_fuse(&max_agg_stacked(f)?, &d),
            None => Ok(d),
        }
    }

    /// Top-down pass. `batch` is the number of rows in every feature tensor.
    pub fn generate(
        &self,
        ctx: Option<&ContextFeatures>,
        target: Option<&[Tensor]>,
        batch: usize,
        latents: Latents<'_>,
        noise: &mut Noise,
        mode: Mode,
    ) -> Result<Pass> {
        let w = self.cfg.width();
        let s0 = self.spatial[0];
        let mut d = self.h.broadcast_as((batch, w, s0, s0))?.contiguous()?;
        let mut groups = Vec::with_capacity(self.spatial.len());
        for l in 0..self.spatial.len() {
            if let Some(up) = &self.group_ups[l] {
                d = up.forward(&d, mode)?;
            }
            let ctx_l = ctx.map(|c| &c.groups[l]);
            let d_opt = if l > 0 { Some(&d) } else { None };
            let prior = self.prior_head(l, ctx_l, d_opt, batch)?;
            let posterior = match target {
                Some(t) => Some(self.posterior_head(l, &t[l], ctx_l, d_opt)?),
                None => None,
            };
            let z = match &latents {
                Latents::Posterior => {
                    let q = posterior.as_ref().ok_or_else(|| Error::invalid("posterior sampling needs a target"))?;
                    let eps = noise.standard_normal(q.mu.shape(), q.mu.dtype(), q.mu.device())?;
                    (&q.mu + (q.std()? * eps)?)?
                }
                Latents::Prior { temperature } => {
                    if *temperature == 0.0 {
                        prior.mu.clone()
                    } else {
                        let eps = noise.standard_normal(prior.mu.shape(), prior.mu.dtype(), prior.mu.device())?;
                        (&prior.mu + ((prior.std()? * eps)? * *temperature)?)?
                    }
                }
                Latents::Given(zs) => zs.get(l).cloned().ok_or_else(|| Error::invalid("one latent per group"))?,
            };
            d = self.combiners[l].forward(&Tensor::cat(&[&d, &z], 1)?)?;
            for cell in &self.group_cells[l] {
                d = cell.forward(&d, mode)?;
            }
            let last_at_scale = l + 1 == self.spatial.len() || self.spatial[l + 1] != self.spatial[l];
            if last_at_scale {
                d = self.skip(d, ctx)?;
            }
            groups.push(GroupState { prior, posterior, z });
        }
        for up in &self.tail_ups {
            d = up.forward(&d, mode)?;
            d = self.skip(d, ctx)?;
        }
        for cell in &self.post {
            d = cell.forward(&d, mode)?;
        }
        let raw = self.out_conv.forward(&swish(&self.out_bn.forward(&d, mode)?)?)?;
        Ok(Pass { likelihood: LikelihoodParams::from_raw(self.cfg.likelihood, raw, self.cfg.image.0), groups })
    }

    /// Full training-path pass: encode, sample from the posterior, decode.
    pub fn forward_posterior(&self, batch: &Batch, noise: &mut Noise, mode: Mode) -> Result<Pass> {
        let (ctx, tgt) = self.encode(&batch.contexts, Some(&batch.target), mode)?;
        self.generate(ctx.as_ref(), tgt.as_deref(), batch.batch_size()?, Latents::Posterior, noise, mode)
    }

    /// Priors of every group for a fixed set of latents (used by invariance checks).
    pub fn priors_given(&self, contexts: &[Tensor], latents: &[Tensor], batch: usize, mode: Mode) -> Result<Vec<GaussianFeature>> {
        let (ctx, _) = self.encode(contexts, None, mode)?;
        let pass = self.generate(ctx.as_ref(), None, batch, Latents::Given(latents), &mut Noise::new(0), mode)?;
        Ok(pass.groups.into_iter().map(|g| g.prior).collect())
    }
}

/// Element-wise max of aggregated encoder features and decoder features.
pub fn skip_fuse(encoder: &Tensor, decoder: &Tensor) -> Result<Tensor> {
    if encoder.shape() != decoder.shape() {
        return Err(Error::shape(format!("skip fusion of {:?} and {:?}", encoder.shape(), decoder.shape())));
    }
    Ok(encoder.maximum(decoder)?)
}

/// Sum over all but the batch dimension.
fn per_sample_sum(t: &Tensor) -> Result<Tensor> {
    Ok(t.flatten_from(1)?.sum(1)?)
}

impl FusionModel for FusionVae {
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
        self.cfg.hierarchy.group_sizes()
    }

    fn train_loss(&self, batch: &Batch, beta: f64, alpha: &[f64], noise: &mut Noise, mode: Mode) -> Result<(Tensor, LossBreakdown)> {
        let pass = self.forward_posterior(batch, noise, mode)?;
        let y = batch.target.to_dtype(self.ps.dtype())?;
        let recon = pass.likelihood.log_prob(&y)?;
        let kls = pass
            .groups
            .iter()
            .map(|g| gaussian_kl(g.posterior.as_ref().expect("posterior present"), &g.prior))
            .collect::<Result<Vec<_>>>()?;
        fusionvae_elbo(&recon, &kls, beta, alpha)
    }

    fn sample(&self, contexts: &[Tensor], batch: usize, n: usize, temperature: f64, noise: &mut Noise) -> Result<Vec<Tensor>> {
        if n == 0 {
            return Err(Error::invalid("at least one sample"));
        }
        let (ctx, _) = self.encode(contexts, None, Mode::Eval)?;
        let mut out = Vec::with_capacity(n);
        let chunk = sample_chunk(n, batch);
        let mut done = 0;
        while done < n {
            let m = chunk.min(n - done);
            let tiled = match &ctx {
                Some(c) => Some(c.tile(m)?),
                None => None,
            };
            let pass = self.generate(tiled.as_ref(), None, m * batch, Latents::Prior { temperature }, noise, Mode::Eval)?;
            // detached, so the chunk's activations are freed before the next one
            let mean = pass.likelihood.mean()?.detach();
            for i in 0..m {
                out.push(mean.narrow(0, i * batch, batch)?);
            }
            done += m;
        }
        Ok(out)
    }

    fn log_importance_weights(&self, batch: &Batch, s: usize, noise: &mut Noise) -> Result<Option<Tensor>> {
        if s == 0 {
            return Err(Error::invalid("at least one importance sample"));
        }
        let b = batch.batch_size()?;
        let y = batch.target.to_dtype(self.ps.dtype())?;
        let (ctx, tgt) = self.encode(&batch.contexts, Some(&y), Mode::Eval)?;
        let tgt = tgt.expect("target encoded");
        let chunk = sample_chunk(s, b);
        let mut rows = Vec::new();
        let mut done = 0;
        while done < s {
            let m = chunk.min(s - done);
            let tiled_ctx = match &ctx {
                Some(c) => Some(c.tile(m)?),
                None => None,
            };
            let tiled_tgt = tile_target(&tgt, m)?;
            let pass = self.generate(tiled_ctx.as_ref(), Some(&tiled_tgt), m * b, Latents::Posterior, noise, Mode::Eval)?;
            let mut logw = pass.likelihood.log_prob(&y.repeat((m, 1, 1, 1))?)?.to_dtype(DType::F64)?;
            for g in &pass.groups {
                let q = g.posterior.as_ref().expect("posterior present");
                let lp = per_sample_sum(&g.prior.log_prob(&g.z)?)?.to_dtype(DType::F64)?;
                let lq = per_sample_sum(&q.log_prob(&g.z)?)?.to_dtype(DType::F64)?;
                logw = ((logw + lp)? - lq)?;
            }
            rows.push(logw.reshape((m, b))?.detach());
            done += m;
        }
        Ok(Some(Tensor::cat(&rows, 0)?))
    }
}

/// Samples per generator call, keeping each call under ~256 rows.
fn sample_chunk(n: usize, batch: usize) -> usize {
    (256 / batch.max(1)).clamp(1, n.max(1))
}
