//! Dense 2-D convolution as im2col plus one batched matmul.
//!
//! candle's CPU convolution spends most of its time in strided copies and
//! computes the input gradient with a direct transposed convolution. Here the
//! patch extraction and its adjoint are tight loops, and the arithmetic goes
//! through the matmul kernel, which has a fast backward of its own.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

impl Geometry {
    fn out(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + j - pad` is in range.
    fn valid(&self, j: usize, wo: usize, extent: usize) -> (usize, usize) {
        let off = j as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((extent as isize - off + s - 1) / s).clamp(0, wo as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

/// `[B, C, H, W]` to `[B, C*k*k, Ho*Wo]`, rows ordered `(c, i, j)` like a
/// `[O, C, k, k]` weight.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatters patches back, summing overlaps.
struct Col2Im(Geometry);

fn im2col<T: WithDType>(x: &[T], b: usize, c: usize, g: Geometry) -> Vec<T> {
    let (ho, wo) = g.out();
    let (k, plane, rows) = (g.k, g.h * g.w, c * g.k * g.k);
    let mut out = vec![T::zero(); b * rows * ho * wo];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * plane..][..plane];
            for i in 0..k {
                let (y0, y1) = g.valid(i, ho, g.h);
                for j in 0..k {
                    let (x0, x1) = g.valid(j, wo, g.w);
                    let row = &mut out[(bi * rows + (ci * k + i) * k + j) * ho * wo..][..ho * wo];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + i - g.pad;
                        let srow = &src[iy * g.w..][..g.w];
                        let drow = &mut row[oy * wo..][..wo];
                        if g.stride == 1 {
                            let ix0 = x0 + j - g.pad;
                            drow[x0..x1].copy_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                drow[ox] = srow[ox * g.stride + j - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(cols: &[T], b: usize, c: usize, g: Geometry) -> Vec<T> {
    let (ho, wo) = g.out();
    let (k, plane, rows) = (g.k, g.h * g.w, c * g.k * g.k);
    let mut out = vec![T::zero(); b * c * plane];
    for bi in 0..b {
        for ci in 0..c {
            let dst = &mut out[(bi * c + ci) * plane..][..plane];
            for i in 0..k {
                let (y0, y1) = g.valid(i, ho, g.h);
                for j in 0..k {
                    let (x0, x1) = g.valid(j, wo, g.w);
                    let row = &cols[(bi * rows + (ci * k + i) * k + j) * ho * wo..][..ho * wo];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + i - g.pad;
                        let srow = &row[oy * wo..][..wo];
                        let drow = &mut dst[iy * g.w..][..g.w];
                        for ox in x0..x1 {
                            drow[ox * g.stride + j - g.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("im2col: input must be contiguous"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let g = Geometry { h, w, ..self.0 };
        let (ho, wo) = g.out();
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(im2col(contiguous(x, l)?, b, c, g)),
            CpuStorage::F64(x) => CpuStorage::F64(im2col(contiguous(x, l)?, b, c, g)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c * g.k * g.k, ho * wo))))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, rows, _) = l.shape().dims3()?;
        let c = rows / (self.0.k * self.0.k);
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(col2im(contiguous(x, l)?, b, c, self.0)),
            CpuStorage::F64(x) => CpuStorage::F64(col2im(contiguous(x, l)?, b, c, self.0)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, self.0.h, self.0.w))))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Dense convolution `x [B, C, H, W]` with `w [O, C, k, k]`, zero padding `pad`.
pub fn conv2d_im2col(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, wc, k, k2) = w.dims4()?;
    if wc != c || k != k2 || h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
        candle_core::bail!("conv2d: kernel {:?} incompatible with input {:?}", w.shape(), x.shape());
    }
    let g = Geometry { k, stride, pad, h, w: wd };
    let (ho, wo) = g.out();
    let y = if k == 1 && stride == 1 {
        w.reshape((o, c))?.broadcast_matmul(&x.reshape((b, c, h * wd))?)?
    } else {
        let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
        w.reshape((o, c * k * k))?.broadcast_matmul(&cols)?
    };
    y.reshape((b, o, ho, wo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn matches_candle_forward_and_finite_difference_gradients() {
        let dev = Device::Cpu;
        for (k, stride, h) in [(3, 1, 6), (3, 2, 6), (3, 2, 7), (1, 1, 5), (5, 1, 4), (1, 2, 4)] {
            let x = Var::randn(0f64, 1.0, (2, 3, h, h + 1), &dev).unwrap();
            let w = Var::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap();
            let pad = k / 2;
            let ours = conv2d_im2col(x.as_tensor(), w.as_tensor(), stride, pad).unwrap();
            let theirs = x.as_tensor().conv2d(w.as_tensor(), pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims(), "k={k} s={stride}");
            assert!(max_diff(&ours, &theirs) < 1e-12);
            // gradients of <conv(x, w), proj> against central differences
            // (exact up to round-off, the loss is linear in each argument)
            let proj = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
            let loss = |x: &Tensor, w: &Tensor| -> f64 {
                (conv2d_im2col(x, w, stride, pad).unwrap() * &proj).unwrap().sum_all().unwrap().to_scalar().unwrap()
            };
            let grads = (ours * &proj).unwrap().sum_all().unwrap().backward().unwrap();
            for (wrt, v) in [(0, &x), (1, &w)] {
                let g: Vec<f64> = grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                let base: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
                for i in (0..base.len()).step_by(7) {
                    let bumped = |d: f64| {
                        let mut b = base.clone();
                        b[i] += d;
                        Tensor::from_vec(b, v.as_tensor().dims(), &dev).unwrap()
                    };
                    let (p, m) = (bumped(0.5), bumped(-0.5));
                    let fd = if wrt == 0 { loss(&p, w.as_tensor()) - loss(&m, w.as_tensor()) } else { loss(x.as_tensor(), &p) - loss(x.as_tensor(), &m) };
                    assert!((fd - g[i]).abs() < 1e-9, "k={k} s={stride} wrt={wrt} i={i}: {fd} vs {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let dev = Device::Cpu;
        let g = Geometry { k: 3, stride: 2, pad: 1, h: 5, w: 6 };
        let x = Tensor::randn(0f64, 1.0, (2, 3, 5, 6), &dev).unwrap();
        let cx = x.apply_op1(Im2Col(g)).unwrap();
        let c = Tensor::randn(0f64, 1.0, cx.dims(), &dev).unwrap();
        let xc = c.apply_op1(Col2Im(g)).unwrap();
        let lhs: f64 = (cx * &c).unwrap().sum_all().unwrap().to_scalar().unwrap();
        let rhs: f64 = (x * xc).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
