//! Stride-1 depthwise 2-D convolution as a candle custom op.
//!
//! candle lowers grouped convolutions to one im2col per group, which is very
//! slow for depthwise kernels on CPU. The direct loop below is an order of
//! magnitude faster for the small kernels used in decoder cells.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

/// Forward (or input-gradient when `flip`) depthwise correlation with "same" padding.
struct DepthwiseConv {
    flip: bool,
}

/// Weight gradient: correlation of the input with the output gradient.
struct DepthwiseWeightGrad {
    k: usize,
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("depthwise conv: {what} must be contiguous"),
    }
}

fn dw_forward<T: WithDType>(x: &[T], w: &[T], dims: (usize, usize, usize, usize), k: usize, flip: bool) -> Vec<T> {
    let (b, c, h, wd) = dims;
    let p = (k / 2) as isize;
    let plane = h * wd;
    let mut out = vec![T::zero(); b * c * plane];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * plane..][..plane];
            let dst = &mut out[(bi * c + ci) * plane..][..plane];
            let kern = &w[ci * k * k..][..k * k];
            for i in 0..k {
                for j in 0..k {
                    let wv = if flip { kern[(k - 1 - i) * k + (k - 1 - j)] } else { kern[i * k + j] };
                    let dy = i as isize - p;
                    let dx = j as isize - p;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (wd as isize - dx).min(wd as isize).max(0) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * wd..][..wd];
                        let drow = &mut dst[y * wd..][..wd];
                        for xx in x0..x1 {
                            drow[xx] += wv * srow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn dw_weight_grad<T: WithDType>(x: &[T], g: &[T], dims: (usize, usize, usize, usize), k: usize) -> Vec<T> {
    let (b, c, h, wd) = dims;
    let p = (k / 2) as isize;
    let plane = h * wd;
    let mut out = vec![T::zero(); c * k * k];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * plane..][..plane];
            let grad = &g[(bi * c + ci) * plane..][..plane];
            for i in 0..k {
                for j in 0..k {
                    let dy = i as isize - p;
                    let dx = j as isize - p;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (wd as isize - dx).min(wd as isize).max(0) as usize;
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for xx in x0..x1 {
                            acc += grad[y * wd + xx] * src[sy * wd + (xx as isize + dx) as usize];
                        }
                    }
                    out[ci * k * k + i * k + j] += acc;
                }
            }
        }
    }
    out
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

impl CustomOp2 for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims4(l1)?;
        let (wc, _, k, k2) = dims4(l2)?;
        if wc != dims.1 || k != k2 || k % 2 == 0 {
            candle_core::bail!("depthwise conv: kernel {:?} incompatible with input {:?}", l2.shape(), l1.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(dw_forward(contiguous(x, l1, "input")?, contiguous(w, l2, "kernel")?, dims, k, self.flip))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(dw_forward(contiguous(x, l1, "input")?, contiguous(w, l2, "kernel")?, dims, k, self.flip))
            }
            _ => candle_core::bail!("depthwise conv: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let k = w.dim(2)?;
        let gx = grad.apply_op2_no_bwd(w, &DepthwiseConv { flip: !self.flip })?;
        let gw = x.contiguous()?.apply_op2_no_bwd(&grad, &DepthwiseWeightGrad { k })?;
        let gw = if self.flip { flip_kernel(&gw)? } else { gw };
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for DepthwiseWeightGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims4(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(dw_weight_grad(contiguous(x, l1, "input")?, contiguous(g, l2, "grad")?, dims, self.k))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(dw_weight_grad(contiguous(x, l1, "input")?, contiguous(g, l2, "grad")?, dims, self.k))
            }
            _ => candle_core::bail!("depthwise conv: unsupported dtype"),
        };
        Ok((out, Shape::from((dims.1, 1, self.k, self.k))))
    }
}

fn flip_kernel(w: &Tensor) -> candle_core::Result<Tensor> {
    let (c, _, k, _) = w.dims4()?;
    let idx: Vec<u32> = (0..k as u32).rev().collect();
    let idx = Tensor::from_vec(idx, k, w.device())?;
    w.index_select(&idx, 2)?.index_select(&idx, 3)?.reshape((c, 1, k, k))
}

/// Depthwise convolution, stride 1, odd kernel, zero "same" padding.
/// `x`: `[B, C, H, W]`, `w`: `[C, 1, k, k]`.
pub fn depthwise_conv2d(x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, DepthwiseConv { flip: false })
}
