//! Flat `key = value` configuration files with dotted keys.
//!
//! Lines starting with `#` are comments. Command-line overrides use the same
//! `key=value` syntax and win over the file. Unknown keys are errors.

use std::path::{Path, PathBuf};

use crate::objective::AlphaMode;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub struct KeySpec {
    pub key: &'static str,
    pub ty: &'static str,
    pub help: &'static str,
}

pub const KEYS: &[KeySpec] = &[
    KeySpec { key: "data.dataset", ty: "fmnist|fceleba|ftless", help: "benchmark to train and evaluate on" },
    KeySpec { key: "data.raw_root", ty: "path", help: "raw dataset directory (empty: FVLAB_DATA_ROOT, or procedural digits for fmnist)" },
    KeySpec { key: "data.seed", ty: "u64", help: "seed of the sample stream (order, augmentation, corruption)" },
    KeySpec { key: "data.train_samples", ty: "usize", help: "procedural training targets (fmnist without raw data)" },
    KeySpec { key: "data.eval_samples", ty: "usize", help: "evaluation targets" },
    KeySpec { key: "model.kind", ty: "fusionvae|cvae|cvae+s|fcn|fcn+s", help: "architecture" },
    KeySpec { key: "model.preset", ty: "string", help: "network preset (fmnist-small, fceleba-small, ftless-small, fmnist, fceleba, ftless)" },
    KeySpec { key: "model.prior_mode", ty: "MaxAggAdd|MeanAggAdd|BayAggAdd|MaxAggAll|MeanAggAll|BayAggAll", help: "context fusion into the priors" },
    KeySpec { key: "model.posterior", ty: "q(y)|q(x,y)", help: "posterior conditioning" },
    KeySpec { key: "model.share_encoder", ty: "bool", help: "context and target encoders share weights" },
    KeySpec { key: "model.width", ty: "usize|auto", help: "channel width override" },
    KeySpec { key: "train.epochs", ty: "usize", help: "passes over the training set" },
    KeySpec { key: "train.steps_per_epoch", ty: "usize|all", help: "cap on batches per epoch" },
    KeySpec { key: "train.batch_size", ty: "usize", help: "targets per batch" },
    KeySpec { key: "train.lr_start", ty: "f64", help: "initial learning rate" },
    KeySpec { key: "train.lr_end", ty: "f64", help: "final learning rate of the cosine schedule" },
    KeySpec { key: "train.beta1", ty: "f64", help: "AdaMax first-moment decay" },
    KeySpec { key: "train.beta2", ty: "f64", help: "AdaMax infinity-norm decay" },
    KeySpec { key: "train.eps", ty: "f64", help: "AdaMax denominator offset" },
    KeySpec { key: "train.weight_decay", ty: "f64", help: "L2 penalty added to gradients" },
    KeySpec { key: "train.grad_clip", ty: "f64", help: "global gradient-norm limit" },
    KeySpec { key: "train.warmup_fraction", ty: "f64", help: "share of steps over which the KL weight ramps from 0 to 1" },
    KeySpec { key: "train.alpha_mode", ty: "uniform|size-weighted|ema-balanced", help: "per-group KL balancing during warm-up" },
    KeySpec { key: "train.seed", ty: "u64", help: "master seed for initialization and latent noise" },
    KeySpec { key: "train.runs", ty: "usize", help: "independent training runs" },
    KeySpec { key: "train.max_skip_fraction", ty: "f64", help: "abort when more batches per epoch are non-finite" },
    KeySpec { key: "train.double_precision", ty: "bool", help: "train in f64" },
    KeySpec { key: "train.log_every", ty: "usize", help: "steps between metric records (0: off)" },
    KeySpec { key: "eval.importance_samples", ty: "usize", help: "importance samples per target for NLL" },
    KeySpec { key: "eval.mse_samples", ty: "usize", help: "prior samples per target for MSE-min" },
    KeySpec { key: "eval.batch_size", ty: "usize", help: "targets per evaluation batch" },
    KeySpec { key: "eval.seed", ty: "u64", help: "seed of evaluation sampling" },
];

fn alpha_name(a: AlphaMode) -> &'static str {
    match a {
        AlphaMode::Uniform => "uniform",
        AlphaMode::SizeWeighted => "size-weighted",
        AlphaMode::EmaBalanced => "ema-balanced",
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

pub fn set(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    let v = v.trim();
    match key {
        "data.dataset" => cfg.dataset = v.parse()?,
        "data.raw_root" => cfg.raw_root = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
        "data.seed" => cfg.data_seed = num(key, v)?,
        "data.train_samples" => cfg.train_samples = num(key, v)?,
        "data.eval_samples" => cfg.eval_samples = num(key, v)?,
        "model.kind" => cfg.model = v.parse()?,
        "model.preset" => cfg.preset = v.to_string(),
        "model.prior_mode" => cfg.prior_mode = v.parse()?,
        "model.posterior" => cfg.posterior = v.parse()?,
        "model.share_encoder" => cfg.share_encoder = boolean(key, v)?,
        "model.width" => cfg.width = if v == "auto" { None } else { Some(num(key, v)?) },
        "train.epochs" => cfg.epochs = num(key, v)?,
        "train.steps_per_epoch" => cfg.steps_per_epoch = if v == "all" { None } else { Some(num(key, v)?) },
        "train.batch_size" => cfg.batch_size = num(key, v)?,
        "train.lr_start" => cfg.lr_start = num(key, v)?,
        "train.lr_end" => cfg.lr_end = num(key, v)?,
        "train.beta1" => cfg.beta1 = num(key, v)?,
        "train.beta2" => cfg.beta2 = num(key, v)?,
        "train.eps" => cfg.eps = num(key, v)?,
        "train.weight_decay" => cfg.weight_decay = num(key, v)?,
        "train.grad_clip" => cfg.grad_clip = num(key, v)?,
        "train.warmup_fraction" => cfg.warmup_fraction = num(key, v)?,
        "train.alpha_mode" => cfg.alpha_mode = v.parse()?,
        "train.seed" => cfg.seed = num(key, v)?,
        "train.runs" => cfg.runs = num(key, v)?,
        "train.max_skip_fraction" => cfg.max_skip_fraction = num(key, v)?,
        "train.double_precision" => cfg.double_precision = boolean(key, v)?,
        "train.log_every" => cfg.log_every = num(key, v)?,
        "eval.importance_samples" => cfg.eval.importance_samples = num(key, v)?,
        "eval.mse_samples" => cfg.eval.mse_samples = num(key, v)?,
        "eval.batch_size" => cfg.eval.batch_size = num(key, v)?,
        "eval.seed" => cfg.eval.seed = num(key, v)?,
        _ => return Err(Error::config(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

pub fn get(cfg: &TrainConfig, key: &str) -> Result<String> {
    Ok(match key {
        "data.dataset" => cfg.dataset.name().to_string(),
        "data.raw_root" => cfg.raw_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        "data.seed" => cfg.data_seed.to_string(),
        "data.train_samples" => cfg.train_samples.to_string(),
        "data.eval_samples" => cfg.eval_samples.to_string(),
        "model.kind" => cfg.model.name().to_string(),
        "model.preset" => cfg.preset.clone(),
        "model.prior_mode" => cfg.prior_mode.name().to_string(),
        "model.posterior" => cfg.posterior.name().to_string(),
        "model.share_encoder" => cfg.share_encoder.to_string(),
        "model.width" => cfg.width.map_or("auto".to_string(), |w| w.to_string()),
        "train.epochs" => cfg.epochs.to_string(),
        "train.steps_per_epoch" => cfg.steps_per_epoch.map_or("all".to_string(), |s| s.to_string()),
        "train.batch_size" => cfg.batch_size.to_string(),
        "train.lr_start" => cfg.lr_start.to_string(),
        "train.lr_end" => cfg.lr_end.to_string(),
        "train.beta1" => cfg.beta1.to_string(),
        "train.beta2" => cfg.beta2.to_string(),
        "train.eps" => cfg.eps.to_string(),
        "train.weight_decay" => cfg.weight_decay.to_string(),
        "train.grad_clip" => cfg.grad_clip.to_string(),
        "train.warmup_fraction" => cfg.warmup_fraction.to_string(),
        "train.alpha_mode" => alpha_name(cfg.alpha_mode).to_string(),
        "train.seed" => cfg.seed.to_string(),
        "train.runs" => cfg.runs.to_string(),
        "train.max_skip_fraction" => cfg.max_skip_fraction.to_string(),
        "train.double_precision" => cfg.double_precision.to_string(),
        "train.log_every" => cfg.log_every.to_string(),
        "eval.importance_samples" => cfg.eval.importance_samples.to_string(),
        "eval.mse_samples" => cfg.eval.mse_samples.to_string(),
        "eval.batch_size" => cfg.eval.batch_size.to_string(),
        "eval.seed" => cfg.eval.seed.to_string(),
        _ => return Err(Error::config(format!("unknown config key {key:?}"))),
    })
}

/// Parses `key = value` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Defaults, then the file, then the overrides.
pub fn resolve(base: TrainConfig, file: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_pairs(&text)? {
            set(&mut cfg, &k, &v)?;
        }
    }
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
        set(&mut cfg, k.trim(), v)?;
    }
    if cfg.raw_root.is_none() {
        if let Some(root) = std::env::var_os("FVLAB_DATA_ROOT").filter(|r| !r.is_empty()) {
            let sub = PathBuf::from(root).join(cfg.dataset.name());
            cfg.raw_root = sub.is_dir().then_some(sub);
        }
    }
    Ok(cfg)
}

/// Every key with its resolved value, in schema order.
pub fn to_text(cfg: &TrainConfig) -> String {
    KEYS.iter().map(|k| format!("{} = {}\n", k.key, get(cfg, k.key).expect("schema keys are known"))).collect()
}

/// Key reference for `--help`.
pub fn help_text() -> String {
    let d = TrainConfig::default();
    let mut s = String::from("Config keys (file lines or --set key=value):\n");
    for k in KEYS {
        s.push_str(&format!("  {:<26} {:<28} default {:<14} {}\n", k.key, k.ty, get(&d, k.key).expect("known"), k.help));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = TrainConfig::default();
        for (k, v) in [("model.kind", "cvae+s"), ("train.lr_start", "0.02"), ("model.width", "12"), ("train.steps_per_epoch", "7"), ("model.posterior", "q(x,y)")] {
            set(&mut cfg, k, v).unwrap();
        }
        let text = to_text(&cfg);
        let back = resolve(TrainConfig::default(), None, &parse_pairs(&text).unwrap().iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>()).unwrap();
        assert_eq!(TrainConfig { raw_root: None, ..back }, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(set(&mut cfg, "train.nope", "1").is_err());
        assert!(set(&mut cfg, "train.epochs", "many").is_err());
        assert!(parse_pairs("no equals sign").is_err());
        assert!(resolve(TrainConfig::default(), None, &["train.epochs".into()]).is_err());
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "# comment\ntrain.epochs = 4\ntrain.batch_size=8\n").unwrap();
        let cfg = resolve(TrainConfig::default(), Some(&p), &["train.epochs=9".into()]).unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size), (9, 8));
    }

    #[test]
    fn help_lists_every_key() {
        let h = help_text();
        for k in KEYS {
            assert!(h.contains(k.key));
        }
    }
}
