//! Metrics and reports: importance-weighted NLL in bits per dimension,
//! best-of-S MSE, per-K tables, multi-run aggregation and image grids.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{FusionSample, ImageTensor, K_MAX};
use crate::model::{Batch, FusionModel};
use crate::rng::{rng_from, Noise};
use crate::{Error, Result};

/// Number of per-K cells plus the average.
pub const CELLS: usize = K_MAX + 2;

pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Stacks samples truncated to `k` contexts into a batch.
pub fn batch_from_samples(samples: &[FusionSample], k: usize, dtype: DType, device: &Device) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if samples.iter().any(|s| s.contexts.len() < k) {
        return Err(Error::invalid(format!("a sample has fewer than {k} contexts")));
    }
    let stack = |imgs: Vec<&ImageTensor>| -> Result<Tensor> {
        let ts = imgs.iter().map(|i| i.to_tensor(dtype, device)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    };
    let target = stack(samples.iter().map(|s| &s.target).collect())?;
    let contexts = (0..k).map(|j| stack(samples.iter().map(|s| &s.contexts[j]).collect())).collect::<Result<Vec<_>>>()?;
    Ok(Batch { target, contexts })
}

/// Importance-sampling estimate of `log p(y | x)` for one target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikelihoodEstimate {
    pub log_p: f64,
    /// Delta-method standard error of `log_p`; NaN with a single sample.
    pub std_err: f64,
}

/// `log(mean_s exp(w_s))` and its standard error.
pub fn log_mean_exp(log_w: &[f64]) -> Result<LogLikelihoodEstimate> {
    if log_w.is_empty() {
        return Err(Error::invalid("at least one importance sample"));
    }
    if log_w.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite { what: "importance weights", detail: format!("{} of {}", log_w.iter().filter(|w| !w.is_finite()).count(), log_w.len()) });
    }
    let s = log_w.len() as f64;
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|v| (v - m).exp()).collect();
    let mean = w.iter().sum::<f64>() / s;
    let std_err = if log_w.len() > 1 {
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1.0);
        var.sqrt() / (s.sqrt() * mean)
    } else {
        f64::NAN
    };
    Ok(LogLikelihoodEstimate { log_p: m + mean.ln(), std_err })
}

/// Negative log-likelihood in bits per dimension.
pub fn bpd(log_p: f64, dims: usize) -> f64 {
    -log_p / (dims as f64 * std::f64::consts::LN_2)
}

/// Per-target NLL estimates (bits/dim) from `[S, B]` log weights; targets with
/// non-finite weights come back as `None`.
pub fn nll_bpd_from_weights(log_w: &Tensor, dims: usize) -> Result<Vec<Option<f64>>> {
    let (_, b) = log_w.dims2()?;
    let cols: Vec<Vec<f64>> = log_w.to_dtype(DType::F64)?.t()?.contiguous()?.to_vec2()?;
    debug_assert_eq!(cols.len(), b);
    Ok(cols.iter().map(|c| log_mean_exp(c).ok().map(|e| bpd(e.log_p, dims))).collect())
}

/// Importance-weighted NLL per target, or `None` for deterministic models.
pub fn nll_bpd(model: &dyn FusionModel, batch: &Batch, samples: usize, noise: &mut Noise) -> Result<Option<Vec<Option<f64>>>> {
    let dims = batch.target.dims()[1..].iter().product();
    match model.log_importance_weights(batch, samples, noise)? {
        Some(w) => Ok(Some(nll_bpd_from_weights(&w, dims)?)),
        None => Ok(None),
    }
}

/// Per-pixel MSE of each output row against the target, `[B]`.
pub fn per_sample_mse(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    let d = (pred.to_dtype(DType::F64)? - target.to_dtype(DType::F64)?)?;
    Ok(d.sqr()?.flatten_from(1)?.mean(1)?.to_vec1()?)
}

/// Running minimum over samples: entry `i` is the best MSE among the first
/// `i + 1` samples, for every target. Input is `[sample][target]`.
pub fn prefix_min(per_sample: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(per_sample.len());
    for row in per_sample {
        let next = match out.last() {
            Some(prev) => prev.iter().zip(row).map(|(a, b)| a.min(*b)).collect(),
            None => row.clone(),
        };
        out.push(next);
    }
    out
}

/// Best-of-`samples` MSE for each target, drawing samples from the prior.
pub fn mse_min(model: &dyn FusionModel, batch: &Batch, samples: usize, noise: &mut Noise) -> Result<Vec<f64>> {
    Ok(mse_min_nested(model, batch, samples, noise)?.pop().expect("at least one sample"))
}

/// Like [`mse_min`] but returns the running minimum after every sample, so
/// nested sample sets share their first draws.
pub fn mse_min_nested(model: &dyn FusionModel, batch: &Batch, samples: usize, noise: &mut Noise) -> Result<Vec<Vec<f64>>> {
    let b = batch.batch_size()?;
    let outs = model.sample(&batch.contexts, b, samples, 1.0, noise)?;
    let per = outs.iter().map(|o| per_sample_mse(o, &batch.target)).collect::<Result<Vec<_>>>()?;
    Ok(prefix_min(&per))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mean: f64,
    pub std: Option<f64>,
}

impl MetricCell {
    pub fn single(mean: f64) -> Self {
        Self { mean, std: None }
    }

    fn format(&self) -> String {
        match self.std {
            Some(s) => format!("{:.6}±{:.6}", self.mean, s),
            None => format!("{:.6}", self.mean),
        }
    }
}

fn with_avg(per_k: [f64; K_MAX + 1]) -> [MetricCell; CELLS] {
    let avg = per_k.iter().sum::<f64>() / per_k.len() as f64;
    let mut out = [MetricCell::single(avg); CELLS];
    for (o, v) in out.iter_mut().zip(per_k) {
        *o = MetricCell::single(v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub importance_samples: usize,
    pub mse_samples: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { importance_samples: 100, mse_samples: 32, batch_size: 16, seed: 0 }
    }
}

/// Table row: cells are K = 0, 1, 2, 3 and the average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub config_hash: String,
    pub nll_bpd: Option<[MetricCell; CELLS]>,
    pub mse_min: [MetricCell; CELLS],
    pub n_importance_samples: usize,
    pub n_mse_samples: usize,
    pub n_targets: usize,
    /// Targets dropped from the NLL average because of non-finite weights.
    pub excluded: usize,
    pub n_runs: usize,
}

impl EvalReport {
    pub fn avg_nll(&self) -> Option<f64> {
        self.nll_bpd.map(|c| c[CELLS - 1].mean)
    }

    pub fn avg_mse(&self) -> f64 {
        self.mse_min[CELLS - 1].mean
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Evaluates every target at K = 0..3 by truncating its context list.
pub fn evaluate(model: &dyn FusionModel, data: &[FusionSample], dataset: &str, config_hash: &str, cfg: &EvalConfig) -> Result<EvalReport> {
    if data.is_empty() || cfg.batch_size == 0 || cfg.mse_samples == 0 || cfg.importance_samples == 0 {
        return Err(Error::invalid("evaluation needs data, a batch size and at least one sample"));
    }
    let store = model.store();
    let (dtype, device) = (store.dtype(), store.device().clone());
    let mut nll = [0.0; K_MAX + 1];
    let mut mse = [0.0; K_MAX + 1];
    let mut excluded = 0;
    let probabilistic = model.kind().is_probabilistic();
    for k in 0..=K_MAX {
        let (mut nll_sum, mut nll_n, mut mse_sum) = (0.0, 0usize, 0.0);
        for (ci, chunk) in data.chunks(cfg.batch_size).enumerate() {
            let batch = batch_from_samples(chunk, k, dtype, &device)?;
            let mut noise = Noise::from_rng(rng_from(cfg.seed, &[k as u64, ci as u64, 1]));
            mse_sum += mse_min(model, &batch, cfg.mse_samples, &mut noise)?.iter().sum::<f64>();
            if probabilistic {
                let mut noise = Noise::from_rng(rng_from(cfg.seed, &[k as u64, ci as u64, 2]));
                for v in nll_bpd(model, &batch, cfg.importance_samples, &mut noise)?.unwrap_or_default() {
                    match v {
                        Some(v) => {
                            nll_sum += v;
                            nll_n += 1;
                        }
                        None => excluded += 1,
                    }
                }
            }
        }
        mse[k] = mse_sum / data.len() as f64;
        nll[k] = if nll_n > 0 { nll_sum / nll_n as f64 } else { f64::NAN };
        if excluded > 0 {
            log::warn!("K={k}: {excluded} targets excluded from NLL (non-finite importance weights)");
        }
    }
    Ok(EvalReport {
        model: model.kind().name().to_string(),
        dataset: dataset.to_string(),
        config_hash: config_hash.to_string(),
        nll_bpd: probabilistic.then(|| with_avg(nll)),
        mse_min: with_avg(mse),
        n_importance_samples: if probabilistic { cfg.importance_samples } else { 0 },
        n_mse_samples: cfg.mse_samples,
        n_targets: data.len(),
        excluded,
        n_runs: 1,
    })
}

/// Mean and spread over repeated runs, plus the best single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: EvalReport,
    pub best: EvalReport,
    pub best_index: usize,
}

fn mean_std(v: &[f64]) -> MetricCell {
    let n = v.len() as f64;
    // shifted sum: exact when every run agrees
    let mean = v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / n;
    // sample standard deviation across runs
    let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    MetricCell { mean, std }
}

/// Aggregates runs of one configuration. The best run is the one with the
/// lowest average NLL, or lowest average MSE-min for deterministic models.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<RunSummary> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to aggregate"))?;
    if reports.iter().any(|r| r.config_hash != first.config_hash || r.model != first.model) {
        return Err(Error::invalid("reports come from different configurations"));
    }
    let cells = |f: &dyn Fn(&EvalReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let mut mse_min = first.mse_min;
    for (i, c) in mse_min.iter_mut().enumerate() {
        *c = cells(&|r| r.mse_min[i].mean);
    }
    let nll_bpd = match first.nll_bpd {
        Some(mut n) => {
            if reports.iter().any(|r| r.nll_bpd.is_none()) {
                return Err(Error::invalid("some runs lack NLL cells"));
            }
            for (i, c) in n.iter_mut().enumerate() {
                *c = cells(&|r| r.nll_bpd.unwrap()[i].mean);
            }
            Some(n)
        }
        None => None,
    };
    let score = |r: &EvalReport| r.avg_nll().unwrap_or_else(|| r.avg_mse());
    let best_index = (0..reports.len()).min_by(|&a, &b| score(&reports[a]).total_cmp(&score(&reports[b]))).unwrap();
    Ok(RunSummary {
        mean: EvalReport {
            nll_bpd,
            mse_min,
            n_runs: reports.len(),
            excluded: reports.iter().map(|r| r.excluded).sum(),
            ..first.clone()
        },
        best: reports[best_index].clone(),
        best_index,
    })
}

pub const CSV_HEADER: &str = "model,nll_k0,nll_k1,nll_k2,nll_k3,nll_avg,mse_k0,mse_k1,mse_k2,mse_k3,mse_avg";

/// One row per architecture; NLL cells of deterministic models read `n/a`.
pub fn table_csv(rows: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.model);
        for i in 0..CELLS {
            out.push(',');
            match r.nll_bpd {
                Some(n) => out.push_str(&n[i].format()),
                None => out.push_str("n/a"),
            }
        }
        for c in &r.mse_min {
            let _ = write!(out, ",{}", c.format());
        }
        out.push('\n');
    }
    out
}

/// Ratio bound on best-of-S MSE with three inputs versus none.
pub const TREND_MSE_RATIO: f64 = 0.5;

/// Outcome of one trend comparison between trained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Desk-scale trends on run-averaged reports: more inputs help the fusion
/// model, and it beats the deterministic baseline on best-of-S MSE.
pub fn trend_checks(fusion: &EvalReport, fcn: &EvalReport) -> Vec<TrendCheck> {
    let (m0, m3) = (fusion.mse_min[0].mean, fusion.mse_min[K_MAX].mean);
    let ratio = m3 / m0;
    let mut out = vec![
        TrendCheck {
            name: "mse_min(K=3) / mse_min(K=0)".into(),
            passed: ratio < TREND_MSE_RATIO,
            detail: format!("{m3:.5} / {m0:.5} = {ratio:.3} (bound {TREND_MSE_RATIO})"),
        },
        TrendCheck {
            name: "avg mse_min fusion < fcn".into(),
            passed: fusion.avg_mse() < fcn.avg_mse(),
            detail: format!("{:.5} vs {:.5}", fusion.avg_mse(), fcn.avg_mse()),
        },
    ];
    out.push(match fusion.nll_bpd {
        Some(n) => TrendCheck {
            name: "NLL(K=0) > NLL(K=3)".into(),
            passed: n[0].mean > n[K_MAX].mean,
            detail: format!("{:.5} vs {:.5} bits/dim", n[0].mean, n[K_MAX].mean),
        },
        None => TrendCheck { name: "NLL(K=0) > NLL(K=3)".into(), passed: false, detail: "no NLL cells".into() },
    });
    out
}

/// One labelled column of a figure grid; all columns have the same number of rows.
#[derive(Debug, Clone)]
pub struct GridColumn {
    pub label: String,
    pub images: Vec<ImageTensor>,
}

pub const GRID_GAP: usize = 2;
const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;
const LABEL_BAND: usize = GLYPH_H + 4;

/// 3x5 bitmap rows (3 low bits each, MSB left) for the characters used in labels.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [6, 1, 2, 4, 7],
        '3' => [6, 1, 2, 1, 6],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 6, 1, 6],
        '6' => [3, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 6],
        '+' => [0, 2, 7, 2, 0],
        '-' => [0, 0, 7, 0, 0],
        '=' => [0, 7, 0, 7, 0],
        '(' => [1, 2, 2, 2, 1],
        ')' => [4, 2, 2, 2, 4],
        ',' => [0, 0, 0, 2, 4],
        '.' => [0, 0, 0, 0, 2],
        _ => [0; 5],
    }
}

/// Top-left corner of tile (`row`, `col`) in a grid of `side`-sized tiles.
pub fn tile_origin(row: usize, col: usize, side_h: usize, side_w: usize, labelled: bool) -> (usize, usize) {
    let top = if labelled { LABEL_BAND } else { 0 };
    (top + row * (side_h + GRID_GAP), col * (side_w + GRID_GAP))
}

/// Composes the grid: one column per entry, white gaps, and a label band on
/// top when any label is non-empty.
pub fn grid_image(columns: &[GridColumn]) -> Result<ImageTensor> {
    let first = columns.first().and_then(|c| c.images.first()).ok_or_else(|| Error::invalid("empty grid"))?;
    let (ch, h, w) = first.shape();
    let rows = columns[0].images.len();
    if columns.iter().any(|c| c.images.len() != rows || c.images.iter().any(|i| i.shape() != (ch, h, w))) {
        return Err(Error::shape("grid columns must share row count and image shape"));
    }
    let labelled = columns.iter().any(|c| !c.label.is_empty());
    let ncol = columns.len();
    let gw = ncol * w + (ncol - 1) * GRID_GAP;
    let gh = rows * h + (rows - 1) * GRID_GAP + if labelled { LABEL_BAND } else { 0 };
    let mut out = ImageTensor::filled(ch, gh, gw, 1.0);
    for (ci, col) in columns.iter().enumerate() {
        for (ri, img) in col.images.iter().enumerate() {
            let (top, left) = tile_origin(ri, ci, h, w, labelled);
            for c in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        out.set(c, top + y, left + x, img.get(c, y, x));
                    }
                }
            }
        }
        if labelled {
            let (_, left) = tile_origin(0, ci, h, w, true);
            let max_chars = (w + 1) / (GLYPH_W + 1);
            for (i, chr) in col.label.chars().take(max_chars).enumerate() {
                let g = glyph(chr);
                for (gy, bits) in g.iter().enumerate() {
                    for gx in 0..GLYPH_W {
                        if bits >> (GLYPH_W - 1 - gx) & 1 == 1 {
                            for c in 0..ch {
                                out.set(c, 2 + gy, left + i * (GLYPH_W + 1) + gx, 0.0);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn render_grid(columns: &[GridColumn], path: &Path) -> Result<()> {
    grid_image(columns)?.save_png(path)
}

/// Columns in the usual figure order: inputs, target, then samples per model.
pub fn figure_columns(inputs: &[Vec<ImageTensor>], target: &[ImageTensor], models: &[(String, Vec<Vec<ImageTensor>>)]) -> Vec<GridColumn> {
    let mut cols: Vec<GridColumn> = inputs.iter().enumerate().map(|(i, imgs)| GridColumn { label: format!("IN{}", i + 1), images: imgs.clone() }).collect();
    cols.push(GridColumn { label: "TARGET".into(), images: target.to_vec() });
    for (name, samples) in models {
        for (j, s) in samples.iter().enumerate() {
            let label = if j == 0 { name.clone() } else { String::new() };
            cols.push(GridColumn { label, images: s.clone() });
        }
    }
    cols
}

/// Two-pixel binary model with a scalar latent: `z ~ N(0, 1)`,
/// `p(y_i = 1 | z) = sigmoid(a_i z + b_i)`, proposal `q = p(z)`.
/// Large `a_i` make the decoder nearly deterministic given `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryLatentToy {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl BinaryLatentToy {
    pub fn log_likelihood_given(&self, y: [bool; 2], z: f64) -> f64 {
        (0..2)
            .map(|i| {
                let logit = self.a[i] * z + self.b[i];
                let sign = if y[i] { 1.0 } else { -1.0 };
                let x = sign * logit;
                // log sigmoid(x) = -softplus(-x)
                -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
            })
            .sum()
    }

    /// `S` log importance weights for target `y`.
    pub fn log_importance_weights(&self, y: [bool; 2], samples: usize, noise: &mut Noise) -> Result<Vec<f64>> {
        let z: Vec<f64> = noise.standard_normal(samples, DType::F64, &Device::Cpu)?.to_vec1()?;
        // q = p, so the prior and proposal densities cancel
        Ok(z.iter().map(|&z| self.log_likelihood_given(y, z)).collect())
    }
}
