//! Fused per-channel ops on `[B, C, H, W]` tensors.
//!
//! Broadcasting a `[1, C, 1, 1]` tensor is cheap forward, but its gradient is
//! a reduction over dims (0, 2, 3), which candle's CPU backend walks element
//! by element through a strided index. These ops reduce per channel plane in
//! contiguous loops instead, accumulating in f64.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("channel op: input must be contiguous"),
    }
}

fn planes(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let d = l.shape().dims();
    if d.len() != 4 {
        candle_core::bail!("channel op: expected [B, C, H, W], got {:?}", d);
    }
    Ok((d[0], d[1], d[2] * d[3]))
}

fn to_f64<T: WithDType>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

/// Per-channel mean and biased variance, `[2, C]`.
fn stats<T: WithDType>(x: &[T], (b, c, p): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let n = (b * p) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x[(bi * c + ci) * p..][..p].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let m = s / n;
        let mut q = 0.0;
        for bi in 0..b {
            q += x[(bi * c + ci) * p..][..p].iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = q / n;
    }
    (mean, var)
}

/// Sums of `g` and of `g * x` per channel.
fn channel_sums<T: WithDType>(g: &[T], x: Option<&[T]>, (b, c, p): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let mut sg = vec![0.0; c];
    let mut sgx = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * p;
            let gs = &g[off..][..p];
            sg[ci] += gs.iter().map(|v| v.to_f64()).sum::<f64>();
            if let Some(x) = x {
                sgx[ci] += gs.iter().zip(&x[off..][..p]).map(|(a, b)| a.to_f64() * b.to_f64()).sum::<f64>();
            }
        }
    }
    (sg, sgx)
}

/// `y = x * scale[c] + shift[c]` per element.
fn affine<T: WithDType>(x: &[T], scale: &[f64], shift: &[f64], (b, c, p): (usize, usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for ci in 0..c {
            let (s, t) = (T::from_f64(scale[ci]), T::from_f64(shift[ci]));
            out.extend(x[(bi * c + ci) * p..][..p].iter().map(|&v| v * s + t));
        }
    }
    out
}

fn vec_storage(v: Vec<f64>, like: &CpuStorage) -> candle_core::Result<CpuStorage> {
    Ok(match like {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        CpuStorage::F64(_) => CpuStorage::F64(v),
        _ => candle_core::bail!("channel op: unsupported dtype"),
    })
}

macro_rules! dispatch {
    ($s:expr, $l:expr, |$x:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(v) => {
                let $x = contiguous(v, $l)?;
                $body
            }
            CpuStorage::F64(v) => {
                let $x = contiguous(v, $l)?;
                $body
            }
            _ => candle_core::bail!("channel op: unsupported dtype"),
        }
    };
}

fn param_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    Ok(dispatch!(s, l, |v| to_f64(v)))
}

fn wrap<T: WithDType>(v: Vec<T>) -> CpuStorage {
    T::to_cpu_storage_owned(v)
}

struct Stats;

impl CustomOp1 for Stats {
    fn name(&self) -> &'static str {
        "channel-stats"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = planes(l)?;
        let (mean, var) = dispatch!(s, l, |x| stats(x, dims));
        let c = dims.1;
        Ok((vec_storage(mean.into_iter().chain(var).collect(), s)?, Shape::from((2, c))))
    }
}

/// Batch-normalization training forward with affine parameters; statistics
/// come from the batch itself and are differentiated through.
struct BatchNormTrain {
    eps: f64,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, s3: &CpuStorage, l3: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = planes(l1)?;
        let (gamma, beta) = (param_f64(s2, l2)?, param_f64(s3, l3)?);
        let out = dispatch!(s1, l1, |x| {
            let (mean, var) = stats(x, dims);
            let scale: Vec<f64> = (0..dims.1).map(|c| gamma[c] / (var[c] + self.eps).sqrt()).collect();
            let shift: Vec<f64> = (0..dims.1).map(|c| beta[c] - mean[c] * scale[c]).collect();
            wrap(affine(x, &scale, &shift, dims))
        });
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, gamma: &Tensor, _beta: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (x, grad) = (x.contiguous()?, grad.contiguous()?);
        let gx = x.apply_op3_no_bwd(gamma, &grad, &BatchNormGrad { eps: self.eps })?;
        // gamma: sum(g * xhat) = invstd * (sum(g x) - mean * sum(g)); beta: sum(g)
        let c = gamma.elem_count();
        let (mean, var) = channel_stats(&x)?;
        let sums = x.apply_op2_no_bwd(&grad, &ChannelSums)?;
        let (sg, sgx) = (sums.get(0)?, sums.get(1)?);
        let invstd = (var + self.eps)?.sqrt()?.recip()?;
        let gg = ((sgx - (mean * &sg)?)? * invstd)?.reshape(c)?;
        Ok((Some(gx), Some(gg), Some(sg.reshape(c)?)))
    }
}

/// Input gradient of [`BatchNormTrain`].
struct BatchNormGrad {
    eps: f64,
}

impl CustomOp3 for BatchNormGrad {
    fn name(&self) -> &'static str {
        "batch-norm-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, s3: &CpuStorage, l3: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = planes(l1)?;
        let gamma = param_f64(s2, l2)?;
        let out = match (s1, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => wrap(bn_grad(contiguous(x, l1)?, contiguous(g, l3)?, &gamma, dims, self.eps)),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => wrap(bn_grad(contiguous(x, l1)?, contiguous(g, l3)?, &gamma, dims, self.eps)),
            _ => candle_core::bail!("batch-norm-grad: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// `dx = gamma invstd (g - mean(g) - xhat mean(g xhat))`.
fn bn_grad<T: WithDType>(x: &[T], g: &[T], gamma: &[f64], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (b, c, p) = dims;
    let n = (b * p) as f64;
    let (mean, var) = stats(x, dims);
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (sg, sgx) = channel_sums(g, Some(x), dims);
    let mut out = Vec::with_capacity(b * c * p);
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * p;
            let (m, is) = (mean[ci], invstd[ci]);
            let k = gamma[ci] * is;
            let a = sg[ci] / n;
            let bb = is * (sgx[ci] - m * sg[ci]) / n;
            out.extend(x[off..][..p].iter().zip(&g[off..][..p]).map(|(&xv, &gv)| {
                let xhat = (xv.to_f64() - m) * is;
                T::from_f64(k * (gv.to_f64() - a - xhat * bb))
            }));
        }
    }
    out
}

/// `x * scale[c] + shift[c]` with gradients for all three.
struct ChannelAffine;

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, s3: &CpuStorage, l3: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = planes(l1)?;
        let (scale, shift) = (param_f64(s2, l2)?, param_f64(s3, l3)?);
        let out = dispatch!(s1, l1, |x| wrap(affine(x, &scale, &shift, dims)));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, scale: &Tensor, _shift: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let c = scale.elem_count();
        let gx = channel_affine(&grad, scale, &scale.zeros_like()?)?;
        let sums = x.contiguous()?.apply_op2_no_bwd(&grad, &ChannelSums)?;
        let gs = sums.narrow(0, 1, 1)?.reshape(c)?.to_dtype(scale.dtype())?;
        let gt = sums.narrow(0, 0, 1)?.reshape(c)?.to_dtype(scale.dtype())?;
        Ok((Some(gx.detach()), Some(gs), Some(gt)))
    }
}

/// `[2, C]`: per-channel sums of the gradient and of gradient times input.
struct ChannelSums;

impl CustomOp2 for ChannelSums {
    fn name(&self) -> &'static str {
        "channel-sums"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = planes(l1)?;
        let (sg, sgx) = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => channel_sums(contiguous(g, l2)?, Some(contiguous(x, l1)?), dims),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => channel_sums(contiguous(g, l2)?, Some(contiguous(x, l1)?), dims),
            _ => candle_core::bail!("channel-sums: unsupported dtype"),
        };
        Ok((vec_storage(sg.into_iter().chain(sgx).collect(), s1)?, Shape::from((2, dims.1))))
    }
}

/// `x + bias[c]`.
struct ChannelBias;

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = planes(l1)?;
        let shift = param_f64(s2, l2)?;
        let ones = vec![1.0; dims.1];
        let out = dispatch!(s1, l1, |x| wrap(affine(x, &ones, &shift, dims)));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, bias: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let sums = grad.apply_op2_no_bwd(&grad, &ChannelSums)?;
        let gb = sums.narrow(0, 0, 1)?.reshape(bias.elem_count())?.to_dtype(bias.dtype())?;
        Ok((Some(grad), Some(gb)))
    }
}

fn check_params(x: &Tensor, p: &Tensor) -> candle_core::Result<()> {
    let c = x.dims4()?.1;
    if p.elem_count() != c || p.dtype() != x.dtype() {
        candle_core::bail!("channel op: parameter {:?} does not match input {:?}", p.shape(), x.shape());
    }
    Ok(())
}

/// Per-channel mean and biased variance of `x`, not differentiated.
pub fn channel_stats(x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
    let s = x.contiguous()?.apply_op1_no_bwd(&Stats)?;
    Ok((s.get(0)?, s.get(1)?))
}

/// Training-mode batch normalization `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    check_params(x, gamma)?;
    check_params(x, beta)?;
    x.contiguous()?.apply_op3(&gamma.flatten_all()?, &beta.flatten_all()?, BatchNormTrain { eps })
}

/// `x * scale[c] + shift[c]`.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> candle_core::Result<Tensor> {
    check_params(x, scale)?;
    check_params(x, shift)?;
    x.contiguous()?.apply_op3(&scale.flatten_all()?, &shift.flatten_all()?, ChannelAffine)
}

/// `x + bias[c]`.
pub fn channel_bias(x: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    check_params(x, bias)?;
    x.contiguous()?.apply_op2(&bias.flatten_all()?, ChannelBias)
}
