//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! nonzero status if any criterion fails.
//!
//! `FVLAB_ACCEPTANCE_ONLY=1,5,9` runs a subset. `FVLAB_DESK_STEPS` sets the
//! optimizer steps per desk-scale training run (criterion 7).

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use fvlab::aggregation::{bayes_agg_closed, bayes_agg_iter, GaussianFeature};
use fvlab::checkpoint::{self, TrainState};
use fvlab::datagen::{FusionGenerator, Split};
use fvlab::eval::{self, bpd, evaluate, log_mean_exp, mse_min_nested, trend_checks, BinaryLatentToy, EvalConfig};
use fvlab::model::{Batch, FusionModel, FusionVae, HierarchySpec, LikelihoodKind, ModelConfig, ModelKind, PriorMode, ScaleSpec};
use fvlab::nn::{sigmoid, Mode};
use fvlab::objective::toy::ConjugateGaussian;
use fvlab::objective::{uniform_log_likelihood, LikelihoodParams};
use fvlab::rng::{rng_from, Noise};
use fvlab::trainer::{eval_samples, run_experiment, train_model, TrainConfig};

// criterion 1
const AGG_INSTANCES: usize = 1000;
const AGG_TOL: f64 = 1e-6;
// criterion 2
const PERM_SEEDS: u64 = 50;
const PERM_TOL: f64 = 1e-6;
// criterion 3
const GRAD_MAX_PARAMS: usize = 200;
const GRAD_H: f64 = 1e-3;
const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error. The loss (~30 nats) carries
/// forward-pass rounding of ~1e-13, so central differences at `GRAD_H` resolve
/// gradients only to ~1e-10 and a 1e-4 relative comparison is meaningful above
/// ~1e-6. Smaller entries (some exactly zero, e.g. a conv bias feeding batch
/// norm) are thereby held to an absolute error of `GRAD_REL_TOL * GRAD_FLOOR`.
const GRAD_FLOOR: f64 = 1e-6;
// criterion 4
const BOUND_DRAWS: usize = 1000;
const BOUND_SLACK: f64 = 1e-9;
// criterion 5
const MIX_DRAWS: usize = 10_000;
const MIX_TOL: f64 = 1e-5;
// criterion 6
const IS_SAMPLES: usize = 100;
const IS_SEEDS: u64 = 200;
const IS_SE_MULT: f64 = 3.0;
const IS_MIN_FRACTION: f64 = 0.95;
// criterion 7
const DESK_RUNS: usize = 3;
const DESK_STEPS_DEFAULT: usize = 1000;
// criterion 8
const DET_TARGETS: usize = 100;
// criterion 9
const MONO_TARGETS: usize = 100;
const MONO_NESTED: [usize; 3] = [1, 8, 32];

type Res<T> = Result<T, Box<dyn StdError>>;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Res<Outcome> {
    Ok(Outcome { passed, detail: detail.into() })
}

fn vals(t: &Tensor) -> Res<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Res<f64> {
    let (a, b) = (vals(a)?, vals(b)?);
    if a.len() != b.len() {
        return Err(format!("length {} vs {}", a.len(), b.len()).into());
    }
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Random images in (0, 1), `[b, c, s, s]`.
fn images(b: usize, c: usize, s: usize, seed: u64, dtype: DType) -> Res<Tensor> {
    let z = Noise::new(seed).standard_normal((b, c, s, s), dtype, &Device::Cpu)?;
    Ok(sigmoid(&z)?)
}

/// Bayesian aggregation: sequential updates against the closed form.
fn aggregation_oracle() -> Res<Outcome> {
    let dev = Device::Cpu;
    let mut rng = rng_from(1, &[]);
    let (mut d_mu, mut d_var) = (0.0f64, 0.0f64);
    for i in 0..AGG_INSTANCES {
        let k = rng.random_range(1..=5usize);
        let dims = (rng.random_range(1..=4usize), rng.random_range(1..=4usize), rng.random_range(1..=4usize));
        let n = dims.0 * dims.1 * dims.2;
        let gaussian = |rng: &mut fvlab::rng::FvRng| -> Res<GaussianFeature> {
            let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let var: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..5.0)).collect();
            Ok(GaussianFeature::new(Tensor::from_vec(mu, dims, &dev)?, Tensor::from_vec(var, dims, &dev)?)?)
        };
        let obs = (0..k).map(|_| gaussian(&mut rng)).collect::<Res<Vec<_>>>()?;
        // every other instance also carries an explicit prior
        let prior = if i % 2 == 1 { Some(gaussian(&mut rng)?) } else { None };
        let a = bayes_agg_iter(prior.as_ref(), &obs)?;
        let b = bayes_agg_closed(prior.as_ref(), &obs)?;
        d_mu = d_mu.max(max_abs_diff(&a.mu, &b.mu)?);
        d_var = d_var.max(max_abs_diff(&a.var, &b.var)?);
    }
    outcome(
        d_mu < AGG_TOL && d_var < AGG_TOL,
        format!("{AGG_INSTANCES} instances, max |dmu| {d_mu:.2e}, max |dvar| {d_var:.2e}, tol {AGG_TOL:.0e}"),
    )
}

/// Two scales (2x2 then 4x4) on 8x8 images with skip fusion, width 8.
fn small_config(mode: PriorMode) -> ModelConfig {
    ModelConfig {
        image: (1, 8, 8),
        hierarchy: HierarchySpec { scales: vec![ScaleSpec { groups: 1, spatial: 2 }, ScaleSpec { groups: 2, spatial: 4 }], latent_channels: 2, base_width: 8 },
        prior_mode: mode,
        skip_fuse: true,
        head_kernel: 3,
        ..ModelConfig::toy(2)
    }
}

const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Every prior-fusion mode gives the same group priors for any ordering of three contexts.
fn permutation_invariance() -> Res<Outcome> {
    let b = 2;
    let mut worst = 0.0f64;
    let mut worst_mode = PriorMode::ALL[0];
    for seed in 0..PERM_SEEDS {
        let contexts = (0..3).map(|i| images(b, 1, 8, 1000 * seed + i, DType::F64)).collect::<Res<Vec<_>>>()?;
        let mut noise = Noise::new(7 + seed);
        let latents = [2usize, 4, 4].iter().map(|&s| noise.standard_normal((b, 2, s, s), DType::F64, &Device::Cpu)).collect::<fvlab::Result<Vec<_>>>()?;
        for mode in PriorMode::ALL {
            let model = FusionVae::new(small_config(mode), &Device::Cpu, DType::F64, seed)?;
            model.store().randomize(0.5, seed + 500)?;
            let reference = model.priors_given(&contexts, &latents, b, Mode::Eval)?;
            for perm in &PERMUTATIONS[1..] {
                let permuted: Vec<Tensor> = perm.iter().map(|&i| contexts[i].clone()).collect();
                let priors = model.priors_given(&permuted, &latents, b, Mode::Eval)?;
                for (p, q) in reference.iter().zip(&priors) {
                    let d = max_abs_diff(&p.mu, &q.mu)?.max(max_abs_diff(&p.var, &q.var)?);
                    if d > worst {
                        worst = d;
                        worst_mode = mode;
                    }
                }
            }
        }
    }
    outcome(
        worst <= PERM_TOL,
        format!("{} modes x 6 orderings x {PERM_SEEDS} seeds, max |dp| {worst:.2e} ({}), tol {PERM_TOL:.0e}", PriorMode::ALL.len(), worst_mode.name()),
    )
}

/// Backprop gradients of the training loss against central differences.
fn gradient_check() -> Res<Outcome> {
    let dev = Device::Cpu;
    let model = FusionVae::new(ModelConfig::toy(2), &dev, DType::F64, 3)?;
    model.store().randomize(0.5, 4)?;
    let n_params = model.num_params();
    let batch = Batch { target: images(2, 1, 4, 10, DType::F64)?, contexts: vec![images(2, 1, 4, 11, DType::F64)?, images(2, 1, 4, 12, DType::F64)?] };
    let (beta, alpha) = (0.7, [1.0, 0.8]);
    // fixed noise: the loss is a deterministic function of the parameters
    let loss = || -> Res<(Tensor, f64)> {
        let (t, b) = model.train_loss(&batch, beta, &alpha, &mut Noise::new(5), Mode::Train)?;
        Ok((t, b.total))
    };
    let (l, _) = loss()?;
    let grads = l.backward()?;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let (mut checked, mut zeros) = (0, 0);
    for (name, var) in model.store().params() {
        let base = vals(var.as_tensor())?;
        let g = match grads.get(var.as_tensor()) {
            Some(g) => vals(g)?,
            None => vec![0.0; base.len()],
        };
        for i in 0..base.len() {
            let at = |delta: f64| -> Res<f64> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &dev)?)?;
                Ok(loss()?.1)
            };
            let fd = (at(GRAD_H)? - at(-GRAD_H)?) / (2.0 * GRAD_H);
            var.set(&Tensor::from_vec(base.clone(), var.dims(), &dev)?)?;
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(GRAD_FLOOR);
            if fd.abs().max(g[i].abs()) < GRAD_FLOOR {
                zeros += 1;
            }
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{i}]: fd {fd:.6e} vs {:.6e}", g[i]);
            }
            checked += 1;
        }
    }
    outcome(
        n_params <= GRAD_MAX_PARAMS && worst < GRAD_REL_TOL,
        format!("{n_params} params (max {GRAD_MAX_PARAMS}), {checked} checked ({zeros} below {GRAD_FLOOR:.0e}), h {GRAD_H:.0e}, max rel err {worst:.2e} at {worst_at}, tol {GRAD_REL_TOL:.0e}"),
    )
}

/// `log N(y; a m + c, a^2 v + s2)` summed over dimensions.
fn conjugate_log_marginal(t: &ConjugateGaussian) -> f64 {
    (0..t.y.len())
        .map(|i| {
            let m = t.a[i] * t.prior_mean[i] + t.c[i];
            let v = t.a[i] * t.a[i] * t.prior_var[i] + t.noise_var[i];
            -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (t.y[i] - m).powi(2) / v)
        })
        .sum()
}

/// The negative loss never exceeds the exact log-likelihood, and no group KL
/// is negative, either on the toy or at any step of short training runs.
fn bound_validity() -> Res<Outcome> {
    let mut rng = rng_from(4, &[]);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut tight_gap = 0.0f64;
    let mut min_kl = f64::INFINITY;
    for _ in 0..BOUND_DRAWS {
        let d = rng.random_range(1..=8usize);
        let toy = ConjugateGaussian::random(&mut rng, d);
        let q_mean: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let q_var: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..4.0)).collect();
        let log_p = conjugate_log_marginal(&toy);
        let b = toy.breakdown(&q_mean, &q_var, 1.0)?;
        worst_gap = worst_gap.max(-b.total - log_p);
        // at the exact posterior the bound is attained
        let (m, v) = toy.exact_posterior();
        let e = toy.breakdown(&m, &v, 1.0)?;
        tight_gap = tight_gap.max((-e.total - log_p).abs());
        for kl in b.kl_per_group.iter().chain(&e.kl_per_group) {
            min_kl = min_kl.min(*kl);
        }
    }
    // every step of a short f32 run per prior mode
    let mut run_min_kl = f64::INFINITY;
    let mut steps = 0;
    for mode in PriorMode::ALL {
        let cfg = TrainConfig { prior_mode: mode, width: Some(8), steps_per_epoch: Some(12), batch_size: 8, train_samples: 256, runs: 1, ..TrainConfig::default() };
        let gen = FusionGenerator::build(&cfg.datagen(), Split::Train)?;
        let (_, epochs, _) = train_model(&cfg, 40, &gen, None)?;
        for e in epochs {
            steps += e.steps - e.skipped;
            run_min_kl = run_min_kl.min(e.min_group_kl.ok_or("no KL recorded")?);
        }
    }
    outcome(
        worst_gap <= BOUND_SLACK && min_kl >= 0.0 && run_min_kl >= 0.0,
        format!(
            "{BOUND_DRAWS} toys: max(-loss - log p) {worst_gap:.2e} (slack {BOUND_SLACK:.0e}), gap at exact posterior {tight_gap:.1e}, min KL {min_kl:.2e}; {steps} training steps over {} modes: min group KL {run_min_kl:.3e}",
            PriorMode::ALL.len()
        ),
    )
}

/// Per-pixel mixture probabilities over all 256 bins sum to one; the uniform
/// model is exactly 8 bits per dimension.
fn likelihood_normalization() -> Res<Outcome> {
    let dev = Device::Cpu;
    let mut rng = rng_from(5, &[]);
    let per_call = 40;
    let mut worst = 0.0f64;
    let mut draws = 0;
    let mut chunk = 0;
    while draws < MIX_DRAWS {
        let m = [1usize, 4, 10][chunk % 3];
        chunk += 1;
        let n_ch = LikelihoodKind::LogisticMixture { components: m }.output_channels(1);
        let mut raw: Vec<f32> = Vec::with_capacity(per_call * 256 * n_ch);
        let mut y: Vec<f32> = Vec::with_capacity(per_call * 256);
        for _ in 0..per_call {
            let mut p: Vec<f32> = (0..m).map(|_| rng.random_range(-4.0..4.0)).collect();
            p.extend((0..m).map(|_| rng.random_range(-1.2f32..1.2)));
            p.extend((0..m).map(|_| rng.random_range(-7.0f32..1.0)));
            for bin in 0..256 {
                raw.extend_from_slice(&p);
                y.push(bin as f32 / 255.0);
            }
        }
        let rows = per_call * 256;
        let params = LikelihoodParams::LogisticMixture { raw: Tensor::from_vec(raw, (rows, n_ch, 1, 1), &dev)?, channels: 1, components: m };
        let lp: Vec<f32> = params.log_prob(&Tensor::from_vec(y, (rows, 1, 1, 1), &dev)?)?.to_vec1()?;
        for d in 0..per_call {
            let total: f64 = lp[d * 256..(d + 1) * 256].iter().map(|&v| (v as f64).exp()).sum();
            worst = worst.max((total - 1.0).abs());
        }
        draws += per_call;
    }
    let mut uniform_ok = true;
    for dims in [1usize, 784, 1024, 3 * 64 * 64] {
        let lp = uniform_log_likelihood(256, dims);
        uniform_ok &= bpd(lp, dims) == 8.0;
        // through the importance-sampling estimator as well
        uniform_ok &= bpd(log_mean_exp(&[lp; 5])?.log_p, dims) == 8.0;
    }
    outcome(
        worst <= MIX_TOL && uniform_ok,
        format!("{draws} f32 draws, max |sum - 1| {worst:.2e} (tol {MIX_TOL:.0e}); uniform BPD exactly 8.0: {uniform_ok}"),
    )
}

/// `log p(y)` of the binary-latent toy by trapezoid quadrature over the latent.
fn toy_exact(t: &BinaryLatentToy, y: [bool; 2]) -> f64 {
    let (lo, hi, n) = (-12.0f64, 12.0f64, 200_000usize);
    let h = (hi - lo) / n as f64;
    let f = |z: f64| {
        let lik: f64 = (0..2)
            .map(|i| {
                let p = 1.0 / (1.0 + (-(t.a[i] * z + t.b[i])).exp());
                if y[i] { p } else { 1.0 - p }
            })
            .product();
        lik * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    };
    let sum: f64 = (0..=n).map(|i| f(lo + i as f64 * h) * if i == 0 || i == n { 0.5 } else { 1.0 }).sum();
    (sum * h).ln()
}

/// The importance-sampled NLL lands within a few standard errors of the truth.
fn importance_sampling_oracle() -> Res<Outcome> {
    let toy = BinaryLatentToy { a: [2.0, -1.5], b: [0.3, -0.2] };
    let mut parts = Vec::new();
    let mut passed = true;
    for y in [[false, false], [false, true], [true, false], [true, true]] {
        let exact_nll = -toy_exact(&toy, y);
        let mut inside = 0;
        for seed in 0..IS_SEEDS {
            let w = toy.log_importance_weights(y, IS_SAMPLES, &mut Noise::new(seed))?;
            let est = log_mean_exp(&w)?;
            if (-est.log_p - exact_nll).abs() < IS_SE_MULT * est.std_err {
                inside += 1;
            }
        }
        let frac = inside as f64 / IS_SEEDS as f64;
        passed &= frac >= IS_MIN_FRACTION;
        parts.push(format!("y={}{}: {:.1}%", y[0] as u8, y[1] as u8, 100.0 * frac));
    }
    outcome(passed, format!("S={IS_SAMPLES}, {IS_SEEDS} seeds within {IS_SE_MULT} SE: {} (min {:.0}%)", parts.join(", "), 100.0 * IS_MIN_FRACTION))
}

fn desk_steps() -> Res<usize> {
    match std::env::var("FVLAB_DESK_STEPS") {
        Ok(s) => Ok(s.parse().map_err(|_| format!("FVLAB_DESK_STEPS={s:?} is not a count"))?),
        Err(_) => Ok(DESK_STEPS_DEFAULT),
    }
}

/// Desk-scale training on FusionMNIST: more inputs help, and the fusion model
/// beats the deterministic baseline.
fn desk_trends() -> Res<Outcome> {
    let steps = desk_steps()?;
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
    // stale runs from an interrupted invocation must not leak into the summary
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }
    let base = TrainConfig { runs: DESK_RUNS, steps_per_epoch: Some(steps), ..TrainConfig::default() };
    let mut means = Vec::new();
    for kind in [ModelKind::FusionVae, ModelKind::Fcn] {
        let cfg = TrainConfig { model: kind, ..base.clone() };
        let out = root.join(kind.name());
        let _ = std::fs::remove_dir_all(&out);
        let t = Instant::now();
        let res = run_experiment(&cfg, &out)?;
        eprintln!("  {} x{}: {:.0}s, failures {:?}", kind.name(), cfg.runs, t.elapsed().as_secs_f64(), res.failures);
        if res.runs.len() < DESK_RUNS {
            return outcome(false, format!("{}: only {} of {DESK_RUNS} runs finished: {:?}", kind.name(), res.runs.len(), res.failures));
        }
        means.push(res.summary.ok_or("no summary")?.mean);
    }
    let checks = trend_checks(&means[0], &means[1]);
    let detail = checks.iter().map(|c| format!("{} {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail)).collect::<Vec<_>>().join("; ");
    outcome(checks.iter().all(|c| c.passed), format!("{DESK_RUNS} runs x {steps} steps each, mean of runs: {detail}"))
}

fn read_tree(root: &Path) -> Res<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn datagen_cli(out: &Path) -> Res<()> {
    let status = Command::new(env!("CARGO_BIN_EXE_fvlab"))
        .args(["datagen", "--dataset", "fmnist", "--seed", "11", "--limit", "48", "--out"])
        .arg(out)
        .stdout(std::process::Stdio::null())
        .status()?;
    if !status.success() {
        return Err(format!("datagen exited with {status}").into());
    }
    Ok(())
}

/// Datagen output is bit-identical across processes, and a reloaded
/// checkpoint reproduces the evaluation report exactly.
fn determinism() -> Res<Outcome> {
    let dir = tempfile::tempdir()?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    datagen_cli(&a)?;
    datagen_cli(&b)?;
    let (ta, tb) = (read_tree(&a)?, read_tree(&b)?);
    let bytes: usize = ta.values().map(Vec::len).sum();
    let data_same = !ta.is_empty() && ta == tb;

    let cfg = TrainConfig { steps_per_epoch: Some(20), batch_size: 8, train_samples: 512, eval_samples: DET_TARGETS, runs: 1, ..TrainConfig::default() };
    let gen = FusionGenerator::build(&cfg.datagen(), Split::Train)?;
    let (model, _, state) = train_model(&cfg, 8, &gen, None)?;
    let data = eval_samples(&cfg)?;
    let ec = EvalConfig { importance_samples: 10, mse_samples: 8, batch_size: 16, seed: 21 };
    let hash = eval::config_hash(&(model.model_config(), model.kind(), ec))?;
    let before = evaluate(model.as_ref(), &data, "fmnist", &hash, &ec)?;
    let path = dir.path().join("model.safetensors");
    checkpoint::save(model.as_ref(), &TrainState { dataset: "fmnist".into(), ..state }, &path)?;
    let (loaded, _) = checkpoint::load(&path, &Device::Cpu)?;
    let after = evaluate(loaded.as_ref(), &data, "fmnist", &hash, &ec)?;
    let report_same = before == after && before.to_json()? == after.to_json()?;
    outcome(
        data_same && report_same,
        format!("datagen: {} files / {bytes} bytes identical: {data_same}; checkpoint round trip on {} targets, report identical: {report_same}", ta.len(), data.len()),
    )
}

/// Best-of-S MSE never increases along nested sample sets.
fn mse_monotonicity() -> Res<Outcome> {
    let cfg = TrainConfig { eval_samples: MONO_TARGETS, ..TrainConfig::default() };
    let model = fvlab::baselines::build_model(ModelKind::FusionVae, cfg.model_config()?, &Device::Cpu, DType::F32, 9)?;
    model.store().randomize(0.3, 10)?;
    let data = eval_samples(&cfg)?;
    let s_max = *MONO_NESTED.last().unwrap();
    let (mut violations, mut mismatches, mut strict) = (0, 0, 0);
    for k in [0usize, 3] {
        let batch = eval::batch_from_samples(&data, k, DType::F32, &Device::Cpu)?;
        let nested = mse_min_nested(model.as_ref(), &batch, s_max, &mut Noise::new(30 + k as u64))?;
        // independent route: the same draws, per-sample MSE by hand
        let outs = model.sample(&batch.contexts, data.len(), s_max, 1.0, &mut Noise::new(30 + k as u64))?;
        let target = vals(&batch.target)?;
        let per_pixel = target.len() / data.len();
        let mse: Vec<Vec<f64>> = outs
            .iter()
            .map(|o| {
                let o = vals(o)?;
                Ok((0..data.len()).map(|t| (0..per_pixel).map(|j| (o[t * per_pixel + j] - target[t * per_pixel + j]).powi(2)).sum::<f64>() / per_pixel as f64).collect())
            })
            .collect::<Res<_>>()?;
        for t in 0..data.len() {
            let mins: Vec<f64> = MONO_NESTED.iter().map(|&s| mse[..s].iter().map(|row| row[t]).fold(f64::INFINITY, f64::min)).collect();
            if mins.windows(2).any(|w| w[1] > w[0]) {
                violations += 1;
            }
            if mins.windows(2).any(|w| w[1] < w[0]) {
                strict += 1;
            }
            for (&s, &m) in MONO_NESTED.iter().zip(&mins) {
                if (nested[s - 1][t] - m).abs() > 1e-12 * m.max(1e-12) {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(
        violations == 0 && mismatches == 0,
        format!("{} targets at K=0 and K=3, S={MONO_NESTED:?}: {violations} increases, {mismatches} mismatches against direct MSE, {strict} strict improvements", data.len()),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("FVLAB_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(&str, fn() -> Res<Outcome>); 9] = [
        ("aggregation oracle", aggregation_oracle),
        ("permutation invariance", permutation_invariance),
        ("gradient check", gradient_check),
        ("bound validity", bound_validity),
        ("likelihood normalization", likelihood_normalization),
        ("importance-sampling oracle", importance_sampling_oracle),
        ("desk-scale FusionMNIST trends", desk_trends),
        ("determinism", determinism),
        ("mse_min monotonicity", mse_monotonicity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("criterion {n} {name}: SKIP");
            continue;
        }
        let t = Instant::now();
        let (passed, detail) = match run() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!("criterion {n} {name}: {} ({detail}) [{:.1}s]", if passed { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        if !passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    }
}
