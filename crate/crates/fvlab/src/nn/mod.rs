//! Minimal layer library over candle tensors: a named parameter store,
//! convolutions, batch norm, squeeze-and-excitation and activations.

mod channel;
mod depthwise;
mod im2col;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{rng_from, FvRng};
use crate::{Error, Result};

pub use channel::{batch_norm_train, channel_affine, channel_bias, channel_stats};
pub use depthwise::depthwise_conv2d;
pub use im2col::conv2d_im2col;

/// Forward-pass mode. Batch norm uses batch statistics and updates its running
/// averages only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-b, b]`.
    Uniform(f64),
    Normal(f64),
}

/// Owns every trainable parameter and non-trainable buffer by name.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: FvRng,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType, seed: u64) -> Self {
        Self { device, dtype, params: BTreeMap::new(), buffers: BTreeMap::new(), rng: rng_from(seed, &[0x1417]) }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn init_tensor(&mut self, shape: &Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n).map(|_| s * Distribution::<f64>::sample(&StandardNormal, &mut self.rng)).collect(),
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Registers a trainable tensor. Names must be unique.
    pub fn param<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let t = self.init_tensor(&shape.into(), init)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(name.to_string(), var);
        Ok(out)
    }

    /// Registers a non-trainable tensor (running statistics).
    pub fn buffer<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::invalid(format!("duplicate buffer {name}")));
        }
        let t = self.init_tensor(&shape.into(), init)?;
        let var = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Every parameter and buffer, by name.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().chain(&self.buffers).map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    /// Overwrites tensors by name. Every stored name must be present with its shape.
    pub fn load_named(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let t = tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != var.shape() {
                return Err(Error::Checkpoint(format!("tensor {name}: {:?} vs {:?}", t.shape(), var.shape())));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.params.contains_key(*k) && !self.buffers.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    /// Replaces every trainable value with a fresh `N(0, std^2)` draw. Used by
    /// gradient checks, where zero-initialized layers would hide errors.
    pub fn randomize(&self, std: f64, seed: u64) -> Result<()> {
        let mut rng = rng_from(seed, &[]);
        for var in self.params.values() {
            let n = var.elem_count();
            let v: Vec<f64> = (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
            var.set(&Tensor::from_vec(v, var.shape(), &self.device)?.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Flattened copy of every parameter (testing and diagnostics).
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_params());
        for v in self.params.values() {
            out.extend(v.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}

/// Logistic function via `tanh`, stable for large |x|.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `log(1 + exp(x))`, stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// `log sigmoid(x) = -softplus(-x)`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?)
}

pub fn swish(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Dense convolution with PyTorch-style uniform init, or zeros when `zero_init`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, zero_init: bool) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let init = if zero_init { Init::Zeros } else { Init::Uniform(bound) };
        let weight = ps.param(&format!("{name}.weight"), (cout, cin, k, k), init)?;
        let bias = if bias { Some(ps.param(&format!("{name}.bias"), cout, if zero_init { Init::Zeros } else { Init::Uniform(bound) })?) } else { None };
        Ok(Self { weight, bias, stride, padding: k / 2, groups: 1 })
    }

    /// Depthwise (one filter per channel) convolution, stride 1.
    pub fn depthwise(ps: &mut ParamStore, name: &str, channels: usize, k: usize) -> Result<Self> {
        let bound = 1.0 / ((k * k) as f64).sqrt();
        let weight = ps.param(&format!("{name}.weight"), (channels, 1, k, k), Init::Uniform(bound))?;
        let bias = Some(ps.param(&format!("{name}.bias"), channels, Init::Uniform(bound))?);
        Ok(Self { weight, bias, stride: 1, padding: k / 2, groups: channels })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.groups > 1 && self.groups == self.out_channels() && self.stride == 1 {
            depthwise_conv2d(x, &self.weight)?
        } else if self.groups == 1 {
            conv2d_im2col(x, &self.weight, self.stride, self.padding)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?
        };
        match &self.bias {
            Some(b) => Ok(channel_bias(&y, b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.95;

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), channels, Init::Ones)?,
            beta: ps.param(&format!("{name}.beta"), channels, Init::Zeros)?,
            running_mean: ps.buffer(&format!("{name}.running_mean"), channels, Init::Zeros)?,
            running_var: ps.buffer(&format!("{name}.running_var"), channels, Init::Ones)?,
            momentum: BN_MOMENTUM,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let (mean, var) = channel_stats(x)?;
                let n = x.elem_count() / self.gamma.elem_count();
                let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                let m = self.momentum;
                let rm = ((self.running_mean.as_tensor().detach() * m)? + (mean * (1.0 - m))?)?;
                let rv = ((self.running_var.as_tensor().detach() * m)? + (var * ((1.0 - m) * unbiased))?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                Ok(batch_norm_train(x, &self.gamma, &self.beta, self.eps)?)
            }
            Mode::Eval => {
                let scale = self.gamma.broadcast_div(&(self.running_var.as_tensor().detach() + self.eps)?.sqrt()?)?;
                let shift = (&self.beta - (self.running_mean.as_tensor().detach() * &scale)?)?;
                Ok(channel_affine(x, &scale, &shift)?)
            }
        }
    }
}

/// Squeeze-and-excitation channel gating.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl SqueezeExcite {
    pub fn hidden_width(channels: usize, reduction: usize, min_hidden: usize) -> usize {
        (channels / reduction.max(1)).max(min_hidden)
    }

    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, hidden: usize) -> Result<Self> {
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w1: ps.param(&format!("{name}.fc1.weight"), (hidden, channels), Init::Uniform(b1))?,
            b1: ps.param(&format!("{name}.fc1.bias"), hidden, Init::Uniform(b1))?,
            w2: ps.param(&format!("{name}.fc2.weight"), (channels, hidden), Init::Uniform(b2))?,
            b2: ps.param(&format!("{name}.fc2.bias"), channels, Init::Uniform(b2))?,
        })
    }

    pub fn num_params(channels: usize, hidden: usize) -> usize {
        2 * channels * hidden + channels + hidden
    }

    /// Per-channel gates in (0, 1), shape `[B, C, 1, 1]`.
    pub fn gates(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let s = x.mean((2, 3))?;
        let h = s.matmul(&self.w1.t()?)?.broadcast_add(&self.b1)?.relu()?;
        let g = sigmoid(&h.matmul(&self.w2.t()?)?.broadcast_add(&self.b2)?)?;
        Ok(g.reshape((b, c, 1, 1))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.gates(x)?)?)
    }
}

/// Reduces a tensor to one f64 (testing and logging).
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new(Device::Cpu, DType::F64, 0)
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn activations_against_scalar_formulas() {
        let xs = [-40.0, -3.0, -0.5, 0.0, 0.7, 5.0, 40.0];
        let x = Tensor::new(&xs, &Device::Cpu).unwrap();
        let sp = vals(&softplus(&x).unwrap());
        let sg = vals(&sigmoid(&x).unwrap());
        let ls = vals(&log_sigmoid(&x).unwrap());
        for (i, &v) in xs.iter().enumerate() {
            let s = 1.0 / (1.0 + (-v as f64).exp());
            assert!((sg[i] - s).abs() < 1e-12);
            assert!((sp[i] - (v as f64).exp().ln_1p()).abs() < 1e-9);
            assert!((ls[i] - s.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = store();
        ps.param("a", 2, Init::Zeros).unwrap();
        assert!(ps.param("a", 2, Init::Zeros).is_err());
        assert!(ps.buffer("a", 2, Init::Zeros).is_err());
    }

    #[test]
    fn conv_parameter_count_and_shape() {
        let mut ps = store();
        let c = Conv2d::new(&mut ps, "c", 3, 5, 3, 2, true, false).unwrap();
        assert_eq!(ps.num_params(), 5 * 3 * 9 + 5);
        let x = Tensor::zeros((2, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(c.forward(&x).unwrap().dims(), &[2, 5, 4, 4]);
    }

    #[test]
    fn batch_norm_normalizes_and_tracks() {
        let mut ps = store();
        let bn = BatchNorm2d::new(&mut ps, "bn", 2).unwrap();
        let x = crate::rng::Noise::new(1).standard_normal((4, 2, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let x = ((x * 3.0).unwrap() + 1.0).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let m = vals(&y.mean_keepdim((0, 2, 3)).unwrap());
        let v = vals(&y.sqr().unwrap().mean_keepdim((0, 2, 3)).unwrap());
        for c in 0..2 {
            assert!(m[c].abs() < 1e-10);
            assert!((v[c] - 1.0).abs() < 1e-3);
        }
        // running mean moved 5% of the way to the batch mean
        let batch_mean = vals(&x.mean_keepdim((0, 2, 3)).unwrap());
        let rm = vals(ps.buffers()["bn.running_mean"].as_tensor());
        assert!((rm[0] - 0.05 * batch_mean[0]).abs() < 1e-12);
        // eval mode is a fixed affine map
        let e1 = bn.forward(&x, Mode::Eval).unwrap();
        let e2 = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(vals(&e1), vals(&e2));
    }

    #[test]
    fn zero_se_gates_uniformly() {
        let mut ps = store();
        let se = SqueezeExcite::new(&mut ps, "se", 4, 2).unwrap();
        ps.load_named(&ps.named_tensors().into_iter().map(|(k, t)| (k, t.zeros_like().unwrap())).collect()).unwrap();
        let x = crate::rng::Noise::new(2).standard_normal((2, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        for g in vals(&se.gates(&x).unwrap()) {
            assert_eq!(g, 0.5);
        }
        assert_eq!(ps.num_params(), SqueezeExcite::num_params(4, 2));
    }

    #[test]
    fn load_named_round_trip_and_rejections() {
        let mut ps = store();
        ps.param("w", (2, 2), Init::Normal(1.0)).unwrap();
        let saved = ps.named_tensors();
        ps.randomize(1.0, 9).unwrap();
        ps.load_named(&saved).unwrap();
        assert_eq!(vals(&ps.named_tensors()["w"]), vals(&saved["w"]));
        let mut bad = saved.clone();
        bad.insert("w".into(), Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap());
        assert!(ps.load_named(&bad).is_err());
        assert!(ps.load_named(&BTreeMap::new()).is_err());
    }
}
