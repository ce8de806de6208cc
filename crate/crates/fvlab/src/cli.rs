//! `fvlab` command line: datagen, train, eval, sample, reconstruct, ablate, report.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure,
//! 4 trend check failed (`report --check`).

use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config;
use crate::datagen::manifest::{load_split, write_split};
use crate::datagen::{DatasetId, FusionGenerator, FusionSample, ImageTensor, Split, K_MAX};
use crate::eval::{self, batch_from_samples, evaluate, figure_columns, render_grid, table_csv, trend_checks, EvalReport, RunSummary};
use crate::model::{FusionModel, ModelKind, PosteriorVariant, PriorMode};
use crate::rng::{rng_from, Noise};
use crate::trainer::{eval_samples, run_experiment, TrainConfig};
use crate::{Error, Result};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_TREND: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "fvlab", version, about = "Multi-image fusion with hierarchical conditional VAEs", after_help = config_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn config_help() -> String {
    config::help_text()
}

/// Configuration file plus `key=value` overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override, e.g. `--set train.epochs=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a fusion benchmark on disk (PNG tree plus manifest).
    #[command(after_help = config_help())]
    Datagen {
        #[arg(long)]
        dataset: DatasetId,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Samples per split.
        #[arg(long)]
        limit: Option<usize>,
        /// Raw dataset directory (defaults to $FVLAB_DATA_ROOT/<dataset>).
        #[arg(long)]
        raw_root: Option<PathBuf>,
    },
    /// Train `train.runs` models, evaluate and aggregate them.
    #[command(after_help = config_help())]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint at K = 0..3.
    #[command(after_help = config_help())]
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Evaluate on a generated split directory instead of regenerating samples.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples for evaluation targets and save a grid.
    #[command(after_help = config_help())]
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        targets: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction: feed the target itself, optionally with three corrupted views.
    #[command(after_help = config_help())]
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also feed the three corrupted views.
        #[arg(long)]
        with_corrupted: bool,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        targets: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior and aggregation ablation grids.
    #[command(after_help = config_help())]
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// posterior, aggregation, or both.
        #[arg(long, default_value = "both")]
        grid: String,
        /// Train cells that have no results yet.
        #[arg(long)]
        train: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tables and figures from finished experiments.
    Report {
        /// Directory holding experiment directories (each with summary.json and config.txt).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Exit with code 4 when the desk-scale trends do not hold.
        #[arg(long)]
        check: bool,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Training config for commands that start from a checkpoint: the dataset
/// recorded in it, then file and overrides.
fn config_for_checkpoint(dataset: &str, args: &ConfigArgs) -> Result<TrainConfig> {
    let base = TrainConfig { dataset: dataset.parse()?, ..TrainConfig::default() };
    config::resolve(base, args.config.as_deref(), &args.overrides)
}

fn load_targets(cfg: &TrainConfig, n: usize) -> Result<Vec<FusionSample>> {
    let mut samples = eval_samples(&TrainConfig { eval_samples: n.max(1), ..cfg.clone() })?;
    samples.truncate(n);
    if samples.is_empty() {
        return Err(Error::invalid("no evaluation samples"));
    }
    Ok(samples)
}

fn to_images(t: &candle_core::Tensor) -> Result<Vec<ImageTensor>> {
    (0..t.dim(0)?).map(|i| ImageTensor::from_tensor(&t.get(i)?)).collect()
}

/// Input columns, target column and model sample columns for a figure.
fn sample_figure(models: &[(String, &dyn FusionModel)], samples: &[FusionSample], k: usize, n: usize, temperature: f64, seed: u64) -> Result<Vec<eval::GridColumn>> {
    let inputs: Vec<Vec<ImageTensor>> = (0..k).map(|j| samples.iter().map(|s| s.contexts[j].clone()).collect()).collect();
    let target: Vec<ImageTensor> = samples.iter().map(|s| s.target.clone()).collect();
    let mut cols = Vec::new();
    for (mi, (name, m)) in models.iter().enumerate() {
        let store = m.store();
        let batch = batch_from_samples(samples, k, store.dtype(), store.device())?;
        let mut noise = Noise::from_rng(rng_from(seed, &[mi as u64, 0xF1]));
        let outs = m.sample(&batch.contexts, samples.len(), n, temperature, &mut noise)?;
        cols.push((name.to_uppercase(), outs.iter().map(to_images).collect::<Result<Vec<_>>>()?));
    }
    Ok(figure_columns(&inputs, &target, &cols))
}

fn reconstruction_figure(model: &dyn FusionModel, samples: &[FusionSample], with_corrupted: bool, n: usize, temperature: f64, seed: u64) -> Result<Vec<eval::GridColumn>> {
    let store = model.store();
    let k = if with_corrupted { K_MAX } else { 0 };
    let batch = batch_from_samples(samples, k, store.dtype(), store.device())?;
    let mut noise = Noise::from_rng(rng_from(seed, &[0xEC]));
    let outs = model.reconstruct(&batch.target, &batch.contexts, n, temperature, &mut noise)?;
    let inputs: Vec<Vec<ImageTensor>> = (0..k).map(|j| samples.iter().map(|s| s.contexts[j].clone()).collect()).collect();
    let target: Vec<ImageTensor> = samples.iter().map(|s| s.target.clone()).collect();
    let cols = vec![(model.kind().name().to_uppercase(), outs.iter().map(to_images).collect::<Result<Vec<_>>>()?)];
    Ok(figure_columns(&inputs, &target, &cols))
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Datagen { dataset, seed, out, limit, raw_root } => {
            let mut cfg = TrainConfig { dataset, data_seed: seed, raw_root, ..TrainConfig::default() };
            cfg = config::resolve(cfg, None, &[])?;
            let mut dg = cfg.datagen();
            if let Some(l) = limit {
                dg.limit = Some(l);
                dg.procedural_train = dg.procedural_train.min(l);
                dg.procedural_eval = dg.procedural_eval.min(l);
            }
            for split in [Split::Train, Split::Eval] {
                let gen = FusionGenerator::build(&dg, split)?;
                let m = write_split(&gen, &out, limit)?;
                println!("{:?}: {} samples", split, m.samples.len());
            }
            Ok(0)
        }
        Command::Train { cfg, out } => {
            let tc = config::resolve(TrainConfig::default(), cfg.config.as_deref(), &cfg.overrides)?;
            tc.validate()?;
            // resolve the architecture up front so config errors surface before training
            tc.model_config()?;
            write(&out.join("config.txt"), config::to_text(&tc))?;
            let res = run_experiment(&tc, &out)?;
            for f in &res.failures {
                eprintln!("run {} failed: {}", f.0, f.1);
            }
            if let Some(s) = &res.summary {
                print!("{}", table_csv(&[s.mean.clone()]));
                println!("({} of {} runs)", res.runs.len(), tc.runs);
            }
            Ok(0)
        }
        Command::Eval { checkpoint, cfg, data, out } => {
            let (model, meta) = checkpoint::load(&checkpoint, &Device::Cpu)?;
            let tc = config_for_checkpoint(&meta.state.dataset, &cfg)?;
            write(&out.join("config.txt"), config::to_text(&tc))?;
            let samples = match data {
                Some(dir) => load_split(&dir)?.1,
                None => eval_samples(&tc)?,
            };
            let hash = eval::config_hash(&(&meta.config, meta.kind, tc.eval))?;
            let report = evaluate(model.as_ref(), &samples, tc.dataset.name(), &hash, &tc.eval)?;
            write(&out.join("report.json"), report.to_json()?)?;
            let csv = table_csv(&[report]);
            write(&out.join("table.csv"), &csv)?;
            print!("{csv}");
            Ok(0)
        }
        Command::Sample { checkpoint, cfg, k, n, targets, temperature, out } => {
            if k > K_MAX || n == 0 {
                return Err(Error::config(format!("need 0 <= k <= {K_MAX} and n >= 1")));
            }
            let (model, meta) = checkpoint::load(&checkpoint, &Device::Cpu)?;
            let tc = config_for_checkpoint(&meta.state.dataset, &cfg)?;
            let samples = load_targets(&tc, targets)?;
            let cols = sample_figure(&[(model.kind().name().to_string(), model.as_ref())], &samples, k, n, temperature, tc.eval.seed)?;
            render_grid(&cols, &out)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Reconstruct { checkpoint, cfg, with_corrupted, n, targets, temperature, out } => {
            let (model, meta) = checkpoint::load(&checkpoint, &Device::Cpu)?;
            let tc = config_for_checkpoint(&meta.state.dataset, &cfg)?;
            let samples = load_targets(&tc, targets)?;
            render_grid(&reconstruction_figure(model.as_ref(), &samples, with_corrupted, n, temperature, tc.eval.seed)?, &out)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Ablate { cfg, grid, train, out } => ablate(&cfg, &grid, train, &out),
        Command::Report { input, out, check } => report(&input, &out, check),
    }
}

/// Cells of an ablation grid: label, posterior, prior mode.
pub fn ablation_cells(grid: &str) -> Result<Vec<(String, PosteriorVariant, PriorMode)>> {
    let posterior = || PosteriorVariant::ALL.iter().map(|&p| (p.name().to_string(), p, PriorMode::MaxAggAdd)).collect::<Vec<_>>();
    let aggregation = || PriorMode::ALL.iter().map(|&m| (m.name().to_string(), PosteriorVariant::Y, m)).collect::<Vec<_>>();
    match grid {
        "posterior" => Ok(posterior()),
        "aggregation" => Ok(aggregation()),
        "both" => Ok(posterior().into_iter().chain(aggregation()).collect()),
        other => Err(Error::config(format!("unknown ablation grid {other:?}"))),
    }
}

fn cell_dir(out: &Path, label: &str) -> PathBuf {
    let safe: String = label.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    out.join(safe)
}

/// Ablation table: one row per cell, NLL and MSE-min per K and averaged.
pub fn ablation_csv(rows: &[(String, EvalReport)]) -> String {
    let body = table_csv(&rows.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
    let mut lines = body.lines();
    let mut out = format!("cell,{}\n", lines.next().unwrap_or_default());
    for ((label, _), line) in rows.iter().zip(lines) {
        out.push_str(&format!("\"{label}\",{line}\n"));
    }
    out
}

fn ablate(args: &ConfigArgs, grid: &str, train: bool, out: &Path) -> Result<i32> {
    let base = config::resolve(TrainConfig::default(), args.config.as_deref(), &args.overrides)?;
    base.validate()?;
    let cells = ablation_cells(grid)?;
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for (label, posterior, mode) in &cells {
        let dir = cell_dir(out, label);
        let tc = TrainConfig { posterior: *posterior, prior_mode: *mode, model: ModelKind::FusionVae, ..base.clone() };
        let summary_path = dir.join("summary.json");
        if !summary_path.exists() {
            if !train {
                return Err(Error::config(format!("no results for cell {label} under {}; pass --train", dir.display())));
            }
            write(&dir.join("config.txt"), config::to_text(&tc))?;
            run_experiment(&tc, &dir)?;
        }
        let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?)?;
        let best = dir.join(format!("run{}", summary.best_index)).join("model.safetensors");
        rows.push((label.clone(), summary.mean));
        models.push((label.clone(), best));
    }
    let csv = ablation_csv(&rows);
    write(&out.join(format!("ablation_{grid}.csv")), &csv)?;
    print!("{csv}");
    let samples = load_targets(&base, 4)?;
    let loaded = models.iter().map(|(l, p)| Ok((l.clone(), checkpoint::load(p, &Device::Cpu)?.0))).collect::<Result<Vec<_>>>()?;
    let refs: Vec<(String, &dyn FusionModel)> = loaded.iter().map(|(l, m)| (l.replace(['(', ')', ','], ""), m.as_ref())).collect();
    render_grid(&sample_figure(&refs, &samples, K_MAX, 1, 1.0, base.eval.seed)?, &out.join(format!("ablation_{grid}.png")))?;
    Ok(0)
}

struct Experiment {
    cfg: TrainConfig,
    summary: RunSummary,
    dir: PathBuf,
}

fn find_experiments(input: &Path) -> Result<Vec<Experiment>> {
    let mut dirs = vec![input.to_path_buf()];
    if let Ok(rd) = std::fs::read_dir(input) {
        let mut subs: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        subs.sort();
        dirs.extend(subs);
    } else {
        return Err(Error::config(format!("cannot read input directory {}", input.display())));
    }
    let mut out = Vec::new();
    for dir in dirs {
        let (s, c) = (dir.join("summary.json"), dir.join("config.txt"));
        if s.is_file() && c.is_file() {
            let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(&s).map_err(|e| Error::io(&s, e))?)?;
            let cfg = config::resolve(TrainConfig::default(), Some(&c), &[])?;
            out.push(Experiment { cfg, summary, dir });
        }
    }
    Ok(out)
}

fn report(input: &Path, out: &Path, check: bool) -> Result<i32> {
    let experiments = find_experiments(input)?;
    if experiments.is_empty() {
        return Err(Error::config(format!("no experiments (summary.json + config.txt) under {}", input.display())));
    }
    // build the whole bundle in memory first so a failure leaves nothing behind
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut checks_failed = false;
    let mut datasets: Vec<DatasetId> = experiments.iter().map(|e| e.cfg.dataset).collect();
    datasets.dedup();
    for ds in datasets {
        let mut exps: Vec<&Experiment> = experiments.iter().filter(|e| e.cfg.dataset == ds).collect();
        exps.sort_by_key(|e| ModelKind::ALL.iter().position(|k| *k == e.cfg.model));
        let means: Vec<EvalReport> = exps.iter().map(|e| e.summary.mean.clone()).collect();
        let bests: Vec<EvalReport> = exps.iter().map(|e| e.summary.best.clone()).collect();
        files.push((out.join(format!("{}_mean_std.csv", ds.name())), table_csv(&means).into_bytes()));
        files.push((out.join(format!("{}_best.csv", ds.name())), table_csv(&bests).into_bytes()));
        let fusion = exps.iter().find(|e| e.cfg.model == ModelKind::FusionVae);
        let fcn = exps.iter().find(|e| e.cfg.model == ModelKind::Fcn);
        if let (Some(f), Some(c)) = (fusion, fcn) {
            let checks = trend_checks(&f.summary.mean, &c.summary.mean);
            let mut text = String::new();
            for t in &checks {
                text.push_str(&format!("{} {}: {}\n", if t.passed { "PASS" } else { "FAIL" }, t.name, t.detail));
                checks_failed |= !t.passed;
            }
            print!("{text}");
            files.push((out.join(format!("{}_trends.txt", ds.name())), text.into_bytes()));
        } else if check {
            return Err(Error::config(format!("{}: trend check needs fusionvae and fcn experiments", ds.name())));
        }
        // figures from the best run of every architecture
        let loaded = exps
            .iter()
            .map(|e| {
                let p = e.dir.join(format!("run{}", e.summary.best_index)).join("model.safetensors");
                Ok((e.cfg.model.name().to_string(), checkpoint::load(&p, &Device::Cpu)?.0))
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<(String, &dyn FusionModel)> = loaded.iter().map(|(l, m)| (l.clone(), m.as_ref())).collect();
        let cfg0 = &exps[0].cfg;
        let samples = load_targets(cfg0, 4)?;
        for k in 0..=K_MAX {
            let png = grid_png(&sample_figure(&refs, &samples, k, 2, 1.0, cfg0.eval.seed)?)?;
            files.push((out.join(format!("{}_samples_k{k}.png", ds.name())), png));
        }
        if let Some((_, m)) = refs.iter().find(|(l, _)| l == ModelKind::FusionVae.name()) {
            for with in [false, true] {
                let png = grid_png(&reconstruction_figure(*m, &samples, with, 2, 1.0, cfg0.eval.seed)?)?;
                files.push((out.join(format!("{}_reconstruct{}.png", ds.name(), if with { "_corrupted" } else { "" })), png));
            }
        }
    }
    for (p, bytes) in &files {
        write(p, bytes)?;
    }
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(if check && checks_failed { EXIT_TREND } else { 0 })
}

fn grid_png(cols: &[eval::GridColumn]) -> Result<Vec<u8>> {
    let dir = std::env::temp_dir().join(format!("fvlab-grid-{}", std::process::id()));
    let path = dir.join("g.png");
    render_grid(cols, &path)?;
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let _ = std::fs::remove_dir_all(&dir);
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_subcommand_parses_and_help_lists_keys() {
        for args in [
            vec!["fvlab", "datagen", "--dataset", "fmnist", "--out", "x", "--limit", "10"],
            vec!["fvlab", "train", "--out", "x", "--set", "train.epochs=2"],
            vec!["fvlab", "eval", "--checkpoint", "c", "--out", "x"],
            vec!["fvlab", "sample", "--checkpoint", "c", "--out", "x.png"],
            vec!["fvlab", "reconstruct", "--checkpoint", "c", "--out", "x.png", "--with-corrupted"],
            vec!["fvlab", "ablate", "--grid", "aggregation", "--out", "x"],
            vec!["fvlab", "report", "--input", "i", "--out", "o", "--check"],
        ] {
            Cli::try_parse_from(args.clone()).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
        let help = Cli::try_parse_from(["fvlab", "train", "--help"]).unwrap_err().to_string();
        for k in config::KEYS {
            assert!(help.contains(k.key), "{}", k.key);
        }
    }

    #[test]
    fn ablation_grid_labels() {
        let cells = ablation_cells("aggregation").unwrap();
        let names: Vec<&str> = cells.iter().map(|c| c.0.as_str()).collect();
        assert_eq!(names, ["MaxAggAdd", "MeanAggAdd", "BayAggAdd", "MaxAggAll", "MeanAggAll", "BayAggAll"]);
        assert_eq!(ablation_cells("posterior").unwrap().len(), 2);
        assert!(ablation_cells("bogus").is_err());
    }

    #[test]
    fn config_errors_map_to_exit_code_two() {
        assert_eq!(main_with_args(["fvlab", "train", "--out", "/nonexistent/x", "--set", "train.bogus=1"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["fvlab", "frobnicate"]), EXIT_CONFIG);
    }

    #[test]
    fn report_on_empty_input_fails_without_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("bundle");
        assert_eq!(main_with_args(["fvlab", "report", "--input", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_CONFIG);
        assert!(!out.exists());
    }
}
