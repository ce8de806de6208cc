//! Python bindings: datasets, aggregation, models, training and evaluation.
//!
//! Images cross the boundary as flat `list[float]` in `[C, H, W]` order
//! together with their shape; reports and summaries as JSON strings.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fvlab::aggregation::{bayes_agg_closed, bayes_agg_iter, GaussianFeature};
use fvlab::baselines::build_model;
use fvlab::checkpoint::{self, TrainState};
use fvlab::config;
use fvlab::datagen::manifest::write_split;
use fvlab::datagen::{DatasetId, FusionGenerator, ImageTensor, Split};
use fvlab::eval::{self, evaluate, EvalConfig};
use fvlab::model::{FusionModel, ModelKind};
use fvlab::rng::Noise;
use fvlab::trainer::{eval_samples, run_experiment, TrainConfig};

fn err(e: fvlab::Error) -> PyErr {
    match e {
        fvlab::Error::Config(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn cerr(e: candle_core::Error) -> PyErr {
    err(e.into())
}

type Image = ((usize, usize, usize), Vec<f32>);

fn image_out(img: &ImageTensor) -> Image {
    (img.shape(), img.data().to_vec())
}

fn image_in(shape: (usize, usize, usize), data: Vec<f32>) -> PyResult<ImageTensor> {
    ImageTensor::from_clipped(shape.0, shape.1, shape.2, data).map_err(err)
}

fn split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "eval" | "test" => Ok(Split::Eval),
        other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    }
}

fn train_config(overrides: Vec<String>) -> PyResult<TrainConfig> {
    config::resolve(TrainConfig::default(), None, &overrides).map_err(err)
}

/// Deterministic stream of fusion samples for one split.
#[pyclass(module = "fvlab_py")]
struct Dataset {
    gen: FusionGenerator,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (dataset = "fmnist", split_name = "train", seed = 0, samples = None, raw_root = None))]
    fn new(dataset: &str, split_name: &str, seed: u64, samples: Option<usize>, raw_root: Option<PathBuf>) -> PyResult<Self> {
        let id: DatasetId = dataset.parse().map_err(err)?;
        let mut cfg = TrainConfig { dataset: id, data_seed: seed, raw_root, ..TrainConfig::default() };
        if let Some(n) = samples {
            cfg.train_samples = n;
            cfg.eval_samples = n;
        }
        let mut dg = cfg.datagen();
        dg.limit = samples;
        Ok(Self { gen: FusionGenerator::build(&dg, split(split_name)?).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.gen.len()
    }

    /// `(target, [context, ...])`, each image as `(shape, data)`.
    #[pyo3(signature = (index, epoch = 0))]
    fn sample(&self, index: usize, epoch: u64) -> PyResult<(Image, Vec<Image>)> {
        if index >= self.gen.len() {
            return Err(PyIndexError::new_err(format!("index {index} out of range for {} samples", self.gen.len())));
        }
        let s = self.gen.sample(index, epoch).map_err(err)?;
        Ok((image_out(&s.target), s.contexts.iter().map(image_out).collect()))
    }

    /// Writes PNGs and a manifest under `out`; returns the sample count.
    #[pyo3(signature = (out, limit = None))]
    fn write(&self, out: PathBuf, limit: Option<usize>) -> PyResult<usize> {
        Ok(write_split(&self.gen, &out, limit).map_err(err)?.samples.len())
    }
}

/// Precision-weighted fusion of `K` Gaussian observations of `D` values.
/// Returns `(mu, var)`; `closed=False` uses the sequential update.
#[pyfunction]
#[pyo3(signature = (mu, var, closed = true))]
fn bayes_agg(mu: Vec<Vec<f64>>, var: Vec<Vec<f64>>, closed: bool) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if mu.len() != var.len() {
        return Err(PyValueError::new_err("mu and var need the same number of observations"));
    }
    let obs = mu
        .into_iter()
        .zip(var)
        .map(|(m, v)| {
            let n = m.len();
            let m = Tensor::from_vec(m, n, &Device::Cpu).map_err(cerr)?;
            let v = Tensor::from_vec(v, n, &Device::Cpu).map_err(cerr)?;
            GaussianFeature::new(m, v).map_err(err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let out = if closed { bayes_agg_closed(None, &obs) } else { bayes_agg_iter(None, &obs) }.map_err(err)?;
    Ok((out.mu.to_vec1().map_err(cerr)?, out.var.to_vec1().map_err(cerr)?))
}

/// Bits per dimension of a log-likelihood in nats.
#[pyfunction]
fn bpd(log_p: f64, dims: usize) -> f64 {
    eval::bpd(log_p, dims)
}

/// Every config key with its type, default and help.
#[pyfunction]
fn config_help() -> String {
    config::help_text()
}

/// Trains `train.runs` models under `out` and returns the run summary as JSON.
/// `overrides` are `key=value` strings as on the command line.
#[pyfunction]
#[pyo3(signature = (out, overrides = Vec::new()))]
fn train(out: PathBuf, overrides: Vec<String>) -> PyResult<String> {
    let cfg = train_config(overrides)?;
    std::fs::create_dir_all(&out).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    std::fs::write(out.join("config.txt"), config::to_text(&cfg)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let res = run_experiment(&cfg, &out).map_err(err)?;
    serde_json::to_string(&res.summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// A FusionVAE or baseline with its parameters.
#[pyclass(module = "fvlab_py", unsendable)]
struct Model {
    inner: Box<dyn FusionModel>,
    dataset: DatasetId,
}

#[pymethods]
impl Model {
    /// Fresh model; `overrides` as in [`train`] (e.g. `model.prior_mode=BayAggAll`).
    #[new]
    #[pyo3(signature = (kind = "fusionvae", overrides = Vec::new(), seed = 0))]
    fn new(kind: &str, overrides: Vec<String>, seed: u64) -> PyResult<Self> {
        let mut cfg = train_config(overrides)?;
        cfg.model = kind.parse::<ModelKind>().map_err(err)?;
        let inner = build_model(cfg.model, cfg.model_config().map_err(err)?, &Device::Cpu, cfg.dtype(), seed).map_err(err)?;
        Ok(Self { inner, dataset: cfg.dataset })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, meta) = checkpoint::load(&path, &Device::Cpu).map_err(err)?;
        Ok(Self { inner, dataset: meta.state.dataset.parse().map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let state = TrainState { dataset: self.dataset.name().to_string(), ..TrainState::default() };
        checkpoint::save(self.inner.as_ref(), &state, &path).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Latent group sizes, top-down (empty for deterministic baselines).
    #[getter]
    fn group_sizes(&self) -> Vec<usize> {
        self.inner.group_sizes()
    }

    /// `n` outputs for one target given its context images.
    #[pyo3(signature = (contexts, n = 1, temperature = 1.0, seed = 0))]
    fn sample(&self, contexts: Vec<Image>, n: usize, temperature: f64, seed: u64) -> PyResult<Vec<Image>> {
        let ctx = self.tensors(contexts)?;
        let mut noise = Noise::new(seed);
        let outs = self.inner.sample(&ctx, 1, n, temperature, &mut noise).map_err(err)?;
        outs.iter().map(|t| Ok(image_out(&ImageTensor::from_tensor(&t.get(0).map_err(cerr)?).map_err(err)?))).collect()
    }

    /// Reconstruction: the target is fed as an input, with optional extra views.
    #[pyo3(signature = (target, extra = Vec::new(), n = 1, temperature = 1.0, seed = 0))]
    fn reconstruct(&self, target: Image, extra: Vec<Image>, n: usize, temperature: f64, seed: u64) -> PyResult<Vec<Image>> {
        let t = self.tensors(vec![target])?.remove(0);
        let extra = self.tensors(extra)?;
        let mut noise = Noise::new(seed);
        let outs = self.inner.reconstruct(&t, &extra, n, temperature, &mut noise).map_err(err)?;
        outs.iter().map(|t| Ok(image_out(&ImageTensor::from_tensor(&t.get(0).map_err(cerr)?).map_err(err)?))).collect()
    }

    /// Evaluation report (JSON) on the first `targets` evaluation samples.
    #[pyo3(signature = (targets = 8, importance_samples = 10, mse_samples = 4, seed = 0))]
    fn evaluate(&self, targets: usize, importance_samples: usize, mse_samples: usize, seed: u64) -> PyResult<String> {
        let cfg = TrainConfig { dataset: self.dataset, eval_samples: targets, ..TrainConfig::default() };
        let data = eval_samples(&cfg).map_err(err)?;
        let ec = EvalConfig { importance_samples, mse_samples, seed, ..EvalConfig::default() };
        let hash = eval::config_hash(&(self.inner.model_config(), self.inner.kind(), ec)).map_err(err)?;
        evaluate(self.inner.as_ref(), &data, self.dataset.name(), &hash, &ec).map_err(err)?.to_json().map_err(err)
    }
}

impl Model {
    fn tensors(&self, images: Vec<Image>) -> PyResult<Vec<Tensor>> {
        let dtype: DType = self.inner.store().dtype();
        images
            .into_iter()
            .map(|(shape, data)| {
                let img = image_in(shape, data)?;
                img.to_tensor(dtype, &Device::Cpu).map_err(err)?.unsqueeze(0).map_err(cerr)
            })
            .collect()
    }
}

#[pymodule]
fn fvlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(bayes_agg, m)?)?;
    m.add_function(wrap_pyfunction!(bpd, m)?)?;
    m.add_function(wrap_pyfunction!(config_help, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("MODEL_KINDS", ModelKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bayes_agg_routes_agree_with_hand_computation() {
        // precisions 1 and 1/3 in the second coordinate: var 3/4, mean 1
        let mu = vec![vec![0.0, 1.0], vec![2.0, 1.0]];
        let var = vec![vec![1.0, 1.0], vec![1.0, 3.0]];
        let (m, v) = bayes_agg(mu.clone(), var.clone(), true).unwrap();
        assert_eq!((m.clone(), v.clone()), (vec![1.0, 1.0], vec![0.5, 0.75]));
        let (mi, vi) = bayes_agg(mu, var, false).unwrap();
        assert!(m.iter().zip(&mi).chain(v.iter().zip(&vi)).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(bayes_agg(vec![vec![0.0]], vec![], true).is_err());
    }

    #[test]
    fn images_round_trip_and_clip() {
        let img = image_in((1, 1, 3), vec![-0.5, 0.25, 2.0]).unwrap();
        assert_eq!(image_out(&img), ((1, 1, 3), vec![0.0, 0.25, 1.0]));
        assert!(image_in((1, 2, 2), vec![0.0]).is_err());
    }

    #[test]
    fn splits_and_configs() {
        assert_eq!(split("test").unwrap(), Split::Eval);
        assert!(split("val").is_err());
        assert_eq!(train_config(vec!["model.width=8".into()]).unwrap().width, Some(8));
        assert!(train_config(vec!["model.nope=1".into()]).is_err());
        assert_eq!(bpd(-1024.0 * 256f64.ln(), 1024), 8.0);
    }
}
