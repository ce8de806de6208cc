//! Training loop: random context count per batch, AdaMax with a cosine
//! learning-rate schedule, global-norm clipping, KL warm-up and balancing,
//! checkpointing and repeated runs.

use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_model, match_baseline};
use crate::checkpoint::{self, TrainState};
use crate::datagen::{DatagenConfig, DatasetId, FusionGenerator, FusionSample, Split, K_MAX};
use crate::eval::{aggregate_runs, batch_from_samples, config_hash, evaluate, table_csv, EvalConfig, EvalReport, RunSummary};
use crate::model::{FusionModel, ModelConfig, ModelKind, PosteriorVariant, PriorMode};
use crate::nn::Mode;
use crate::objective::{AlphaMode, JsonlWriter, LossRecord, ScheduleState};
use crate::rng::{derive_seed, rng_from, Noise};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetId,
    pub preset: String,
    pub model: ModelKind,
    pub prior_mode: PriorMode,
    pub posterior: PosteriorVariant,
    pub share_encoder: bool,
    /// Overrides the preset's channel width.
    pub width: Option<usize>,
    pub epochs: usize,
    /// Caps the number of batches per epoch.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_fraction: f64,
    pub alpha_mode: AlphaMode,
    pub seed: u64,
    pub data_seed: u64,
    pub runs: usize,
    pub max_skip_fraction: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub double_precision: bool,
    pub log_every: usize,
    pub eval: EvalConfig,
    pub raw_root: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetId::FusionMnist,
            preset: "fmnist-small".into(),
            model: ModelKind::FusionVae,
            prior_mode: PriorMode::MaxAggAdd,
            posterior: PosteriorVariant::Y,
            share_encoder: true,
            width: None,
            epochs: 1,
            steps_per_epoch: None,
            batch_size: 32,
            lr_start: 0.01,
            lr_end: 0.0001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 200.0,
            warmup_fraction: 0.3,
            alpha_mode: AlphaMode::EmaBalanced,
            seed: 0,
            data_seed: 0,
            runs: 3,
            max_skip_fraction: 0.01,
            train_samples: 60_000,
            eval_samples: 100,
            double_precision: false,
            log_every: 50,
            eval: EvalConfig::default(),
            raw_root: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end < self.lr_start) || self.lr_end <= 0.0 {
            return Err(Error::config("need 0 < lr_end < lr_start"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.runs == 0 || self.train_samples < self.batch_size {
            return Err(Error::config("batch size and runs must be positive, with at least one full batch of data"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("warm-up fraction and moment decays must lie in [0, 1)"));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    /// Hierarchical model configuration before any baseline matching.
    pub fn fusion_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.preset)?;
        if cfg.image != self.dataset.image_shape() {
            return Err(Error::config(format!("preset {} is for {:?} images, dataset {} has {:?}", self.preset, cfg.image, self.dataset.name(), self.dataset.image_shape())));
        }
        cfg.prior_mode = self.prior_mode;
        cfg.posterior = self.posterior;
        cfg.share_encoder = self.share_encoder;
        if let Some(w) = self.width {
            cfg.hierarchy.base_width = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Architecture actually trained: the hierarchical model itself or a
    /// parameter-matched baseline.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let fusion = self.fusion_config()?;
        match self.model {
            ModelKind::FusionVae => Ok(fusion),
            kind => Ok(match_baseline(kind, &fusion)?.config),
        }
    }

    pub fn datagen(&self) -> DatagenConfig {
        let mut d = DatagenConfig::new(self.dataset, self.data_seed);
        d.raw_root = self.raw_root.clone();
        d.procedural_train = self.train_samples;
        d.procedural_eval = self.eval_samples;
        d
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        let full = dataset_len / self.batch_size;
        self.steps_per_epoch.map_or(full, |cap| cap.min(full))
    }
}

/// Cosine annealing from `lr_start` at step 0 to `lr_end` at `total`.
pub fn lr_at(step: u64, total: u64, lr_start: f64, lr_end: f64) -> f64 {
    if total == 0 {
        return lr_end;
    }
    let t = (step.min(total) as f64) / total as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Number of context images for one batch, uniform over 0..=3.
pub fn sample_context_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(0..=K_MAX)
}

/// AdaMax: Adam with the second moment replaced by an exponentially weighted
/// infinity norm.
pub struct AdaMax {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    state: Vec<Option<(Tensor, Tensor)>>,
}

impl AdaMax {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, t: 0, state: vec![None; n_params] }
    }

    /// One update; `grads[i]` is `None` for parameters the loss did not touch.
    pub fn step(&mut self, params: &[&Var], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        self.t += 1;
        let bias = 1.0 - self.beta1.powi(self.t as i32);
        for ((var, g), st) in params.iter().zip(grads).zip(self.state.iter_mut()) {
            let Some(g) = g else { continue };
            // gradients carry their op graph; keeping them in the moment state
            // would pin every earlier step's activations
            let g = g.detach();
            let g = if self.weight_decay > 0.0 { (&g + (var.as_tensor().detach() * self.weight_decay)?)? } else { g };
            let (m, u) = match st.take() {
                Some((m, u)) => (((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?, (u * self.beta2)?.maximum(&g.abs()?)?),
                None => ((&g * (1.0 - self.beta1))?, g.abs()?),
            };
            let delta = (&m / (&u + self.eps)?)?;
            var.set(&(var.as_tensor() - (delta * (lr / bias))?)?)?;
            *st = Some((m, u));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub steps: usize,
    pub skipped: usize,
    pub mean_loss: f64,
    pub k_histogram: [usize; K_MAX + 1],
    /// Smallest per-group KL seen in any step (`None` without latent groups).
    pub min_group_kl: Option<f64>,
}

/// Owns the optimizer and schedule for one model.
pub struct Trainer<'a> {
    model: &'a dyn FusionModel,
    cfg: TrainConfig,
    opt: AdaMax,
    pub schedule: ScheduleState,
    pub step: u64,
    pub total_steps: u64,
    pub skipped_total: u64,
    min_kl: Option<f64>,
    metrics: Option<JsonlWriter>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a dyn FusionModel, cfg: &TrainConfig, total_steps: u64, metrics: Option<JsonlWriter>) -> Self {
        let n = model.store().params().len();
        let warmup = ((total_steps as f64) * cfg.warmup_fraction).round().max(1.0) as u64;
        Self {
            model,
            cfg: cfg.clone(),
            opt: AdaMax::new(n, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay),
            schedule: ScheduleState::new(warmup, model.group_sizes(), cfg.alpha_mode),
            step: 0,
            total_steps,
            skipped_total: 0,
            min_kl: None,
            metrics,
        }
    }

    /// One optimizer step on a batch of samples with `k` contexts. Returns the
    /// loss, or `None` when the batch was skipped for non-finite values.
    pub fn train_step(&mut self, samples: &[FusionSample], k: usize) -> Result<Option<f64>> {
        let store = self.model.store();
        let batch = batch_from_samples(samples, k, store.dtype(), store.device())?;
        let beta = self.schedule.beta();
        let alpha = self.schedule.alphas();
        let mut noise = Noise::from_rng(rng_from(self.cfg.seed, &[self.step, 0x5A]));
        let (loss, breakdown) = self.model.train_loss(&batch, beta, &alpha, &mut noise, Mode::Train)?;
        if !breakdown.total.is_finite() {
            self.skipped_total += 1;
            return Ok(None);
        }
        let grads = loss.backward()?;
        let vars: Vec<&Var> = store.params().values().collect();
        let gs: Vec<Option<Tensor>> = vars.iter().map(|v| grads.get(v.as_tensor()).cloned()).collect();
        let mut sq = 0.0;
        for g in gs.iter().flatten() {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            self.skipped_total += 1;
            return Ok(None);
        }
        let scale = (self.cfg.grad_clip / norm).min(1.0);
        let gs: Vec<Option<Tensor>> = if scale < 1.0 { gs.into_iter().map(|g| g.map(|g| g * scale).transpose()).collect::<candle_core::Result<_>>()? } else { gs };
        let lr = lr_at(self.step, self.total_steps, self.cfg.lr_start, self.cfg.lr_end);
        self.opt.step(&vars, &gs, lr)?;
        self.schedule.observe(&breakdown.kl_per_group);
        if let Some(m) = breakdown.kl_per_group.iter().copied().reduce(f64::min) {
            self.min_kl = Some(self.min_kl.map_or(m, |v| v.min(m)));
        }
        if let Some(w) = self.metrics.as_mut() {
            if self.cfg.log_every > 0 && self.step % self.cfg.log_every as u64 == 0 {
                w.write(&LossRecord::new(self.step, &breakdown))?;
            }
        }
        self.schedule.advance();
        self.step += 1;
        Ok(Some(breakdown.total))
    }

    /// One pass over (a prefix of) the shuffled training set. Batches are
    /// produced on a worker thread through a bounded queue.
    pub fn train_epoch(&mut self, gen: &FusionGenerator, epoch: u64) -> Result<EpochMetrics> {
        let steps = self.cfg.steps_per_epoch(gen.len());
        let bs = self.cfg.batch_size;
        let mut order: Vec<usize> = (0..gen.len()).collect();
        order.shuffle(&mut rng_from(self.cfg.data_seed, &[epoch, 0x0E]));
        order.truncate(steps * bs);
        let mut metrics = EpochMetrics { epoch, steps, ..Default::default() };
        self.min_kl = None;
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Vec<FusionSample>>>(4);
            let order = &order;
            scope.spawn(move || {
                for chunk in order.chunks(bs) {
                    let batch = chunk.iter().map(|&i| gen.sample(i, epoch)).collect::<Result<Vec<_>>>();
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
            });
            for (bi, samples) in rx.iter().enumerate() {
                let samples = samples?;
                let k = sample_context_count(&mut rng_from(self.cfg.seed, &[epoch, bi as u64, 0x4B]));
                metrics.k_histogram[k] += 1;
                match self.train_step(&samples, k)? {
                    Some(l) => {
                        loss_sum += l;
                        used += 1;
                    }
                    None => metrics.skipped += 1,
                }
            }
            Ok(())
        })?;
        metrics.min_group_kl = self.min_kl;
        metrics.mean_loss = if used > 0 { loss_sum / used as f64 } else { f64::NAN };
        if let Some(w) = self.metrics.as_mut() {
            w.flush()?;
        }
        if steps > 0 && metrics.skipped as f64 > self.cfg.max_skip_fraction * steps as f64 {
            return Err(Error::Aborted(format!(
                "epoch {epoch}: {} of {steps} batches had non-finite loss or gradients (limit {:.1}%)",
                metrics.skipped,
                100.0 * self.cfg.max_skip_fraction
            )));
        }
        Ok(metrics)
    }

    pub fn state(&self, epoch: u64, run: usize) -> TrainState {
        TrainState {
            step: self.step,
            epoch,
            run,
            seed: self.cfg.seed,
            dataset: self.cfg.dataset.name().to_string(),
            skipped_batches: self.skipped_total,
            kl_ema: self.schedule.kl_ema.clone(),
        }
    }
}

/// Loads the first `n` evaluation samples.
pub fn eval_samples(cfg: &TrainConfig) -> Result<Vec<FusionSample>> {
    let gen = FusionGenerator::build(&cfg.datagen(), Split::Eval)?;
    (0..cfg.eval_samples.min(gen.len())).map(|i| gen.sample(i, 0)).collect()
}

/// Outcome of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run: usize,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
    pub epochs: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub runs: Vec<RunOutcome>,
    pub failures: Vec<(usize, String)>,
    pub summary: Option<RunSummary>,
}

/// Trains a fresh model for `cfg.epochs` and returns it with its history.
pub fn train_model(cfg: &TrainConfig, seed: u64, gen: &FusionGenerator, metrics: Option<JsonlWriter>) -> Result<(Box<dyn FusionModel>, Vec<EpochMetrics>, TrainState)> {
    let model_cfg = cfg.model_config()?;
    let model = build_model(cfg.model, model_cfg, &Device::Cpu, cfg.dtype(), seed)?;
    let run_cfg = TrainConfig { seed, ..cfg.clone() };
    let total = (cfg.steps_per_epoch(gen.len()) * cfg.epochs) as u64;
    let (history, state) = {
        let mut trainer = Trainer::new(model.as_ref(), &run_cfg, total, metrics);
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs as u64 {
            let m = trainer.train_epoch(gen, epoch)?;
            log::info!("epoch {epoch}: loss {:.4} over {} steps ({} skipped), K histogram {:?}", m.mean_loss, m.steps, m.skipped, m.k_histogram);
            history.push(m);
        }
        (history, trainer.state(cfg.epochs as u64, 0))
    };
    Ok((model, history, state))
}

/// Independent runs with derived seeds, each checkpointed and evaluated;
/// failed runs are recorded and the survivors aggregated.
pub fn run_experiment(cfg: &TrainConfig, out: &Path) -> Result<ExperimentResult> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let gen = FusionGenerator::build(&cfg.datagen(), Split::Train)?;
    let eval_data = eval_samples(cfg)?;
    let hash = config_hash(&(cfg.model_config()?, cfg.model, cfg.eval, cfg.epochs, cfg.batch_size, cfg.train_samples))?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for run in 0..cfg.runs {
        let seed = derive_seed(cfg.seed, &[run as u64]);
        let dir = out.join(format!("run{run}"));
        let outcome = (|| -> Result<RunOutcome> {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let metrics = JsonlWriter::create(&dir.join("metrics.jsonl"))?;
            let (model, epochs, mut state) = train_model(cfg, seed, &gen, Some(metrics))?;
            state.run = run;
            let checkpoint = dir.join("model.safetensors");
            checkpoint::save(model.as_ref(), &state, &checkpoint)?;
            let report = evaluate(model.as_ref(), &eval_data, cfg.dataset.name(), &hash, &cfg.eval)?;
            std::fs::write(dir.join("report.json"), report.to_json()?).map_err(|e| Error::io(&dir, e))?;
            Ok(RunOutcome { run, seed, checkpoint, report, epochs })
        })();
        match outcome {
            Ok(o) => runs.push(o),
            Err(e) => {
                log::error!("run {run} failed: {e}");
                failures.push((run, e.to_string()));
            }
        }
    }
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    let summary = if reports.is_empty() { None } else { Some(aggregate_runs(&reports)?) };
    if let Some(s) = &summary {
        std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(s)?).map_err(|e| Error::io(out, e))?;
        std::fs::write(out.join("table.csv"), table_csv(&[s.mean.clone()])).map_err(|e| Error::io(out, e))?;
        std::fs::write(out.join("table_best.csv"), table_csv(&[s.best.clone()])).map_err(|e| Error::io(out, e))?;
    }
    let result = ExperimentResult { runs, failures, summary };
    std::fs::write(out.join("experiment.json"), serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(out, e))?;
    if result.runs.is_empty() {
        return Err(Error::Aborted(format!("all {} runs failed", cfg.runs)));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints_and_midpoint() {
        assert_eq!(lr_at(0, 1000, 0.01, 0.0001), 0.01);
        assert!((lr_at(1000, 1000, 0.01, 0.0001) - 0.0001).abs() < 1e-18);
        assert!((lr_at(500, 1000, 0.01, 0.0001) - 0.00505).abs() < 1e-15);
        // continuity and monotone decay
        let mut prev = lr_at(0, 1000, 0.01, 0.0001);
        for s in 1..=1000 {
            let lr = lr_at(s, 1000, 0.01, 0.0001);
            assert!(lr <= prev && prev - lr < 1e-4);
            prev = lr;
        }
    }

    #[test]
    fn context_count_is_uniform() {
        let mut rng = rng_from(1, &[]);
        let n = 40_000;
        let mut h = [0usize; 4];
        for _ in 0..n {
            h[sample_context_count(&mut rng)] += 1;
        }
        for c in h {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01, "{h:?}");
        }
    }

    #[test]
    fn adamax_first_step_moves_by_lr() {
        // with bias correction the first update is lr * sign(g)
        let v = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap();
        let g = Tensor::new(&[0.3f64, -4.0, 0.0], &Device::Cpu).unwrap();
        let mut opt = AdaMax::new(1, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&[&v], &[Some(g)], 0.01).unwrap();
        let got: Vec<f64> = v.as_tensor().to_vec1().unwrap();
        assert!((got[0] - 0.99).abs() < 1e-7 && (got[1] + 1.99).abs() < 1e-7 && got[2] == 0.5);
    }

    #[test]
    fn adamax_matches_scalar_reference() {
        let v = Var::from_tensor(&Tensor::new(&[0.7f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdaMax::new(1, 0.9, 0.99, 1e-8, 0.0);
        let (mut p, mut m, mut u) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = (t as f64 * 0.37).sin();
            opt.step(&[&v], &[Some(Tensor::new(&[g], &Device::Cpu).unwrap())], 0.05).unwrap();
            m = 0.9 * m + 0.1 * g;
            u = (0.99 * u).max(g.abs());
            p -= 0.05 / (1.0 - 0.9f64.powi(t)) * m / (u + 1e-8);
        }
        assert!((v.as_tensor().to_vec1::<f64>().unwrap()[0] - p).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr_end: 0.02, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { preset: "fceleba-small".into(), ..Default::default() }.fusion_config().is_err());
    }
}
