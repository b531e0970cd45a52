//! Standard and depthwise 2-D cross-correlation with forward and backward
//! kernels. Standard convolution lowers to a GEMM over an im2col buffer;
//! depthwise convolution runs direct per-channel loops.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`; an odd total puts the
    /// extra cell on the bottom/right.
    Same,
    Valid,
}

/// Output extent and leading pad along one axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
            (out, total / 2)
        }
        Padding::Valid => {
            if input < kernel {
                (0, 0)
            } else {
                ((input - kernel) / stride + 1, 0)
            }
        }
    }
}

/// Range of output positions whose tap at kernel offset `k` lands inside
/// the input, for one axis.
#[inline]
fn tap_range(input: usize, out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // position = o * stride + k - pad must satisfy 0 <= position < input
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k { (input + pad - k).div_ceil(stride) } else { 0 };
    let hi = hi.min(out);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_h: usize,
    pad_w: usize,
}

impl Geometry {
    fn new(x: Shape, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (oh, pad_h) = output_extent(x.h, kh, stride, padding);
        let (ow, pad_w) = output_extent(x.w, kw, stride, padding);
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} larger than input {x}")));
        }
        Ok(Geometry {
            cin: x.c,
            h: x.h,
            w: x.w,
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_h,
            pad_w,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Element>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    cols.fill(T::zero());
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (oh0, oh1) = tap_range(g.h, g.oh, g.stride, g.pad_h, i);
            for j in 0..g.kw {
                let (ow0, ow1) = tap_range(g.w, g.ow, g.stride, g.pad_w, j);
                let row = ((c * g.kh + i) * g.kw + j) * plane;
                for oh in oh0..oh1 {
                    let ih = oh * g.stride + i - g.pad_h;
                    let dst = &mut cols[row + oh * g.ow..row + (oh + 1) * g.ow];
                    let src_row = &src[ih * g.w..(ih + 1) * g.w];
                    for ow in ow0..ow1 {
                        dst[ow] = src_row[ow * g.stride + j - g.pad_w];
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &Geometry, cols: &[T], gx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dst = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (oh0, oh1) = tap_range(g.h, g.oh, g.stride, g.pad_h, i);
            for j in 0..g.kw {
                let (ow0, ow1) = tap_range(g.w, g.ow, g.stride, g.pad_w, j);
                let row = ((c * g.kh + i) * g.kw + j) * plane;
                for oh in oh0..oh1 {
                    let ih = oh * g.stride + i - g.pad_h;
                    let src = &cols[row + oh * g.ow..row + (oh + 1) * g.ow];
                    let dst_row = &mut dst[ih * g.w..(ih + 1) * g.w];
                    for ow in ow0..ow1 {
                        dst_row[ow * g.stride + j - g.pad_w] = dst_row[ow * g.stride + j - g.pad_w] + src[ow];
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n]` (+ `c` when `accumulate`), all row-major.
pub(crate) fn matmul<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents checked above; all matrices are dense row-major.
    unsafe {
        T::gemm(
            m, k, n, T::one(), a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m×n] = aᵀ · b` where `a` is stored row-major as k×m.
pub(crate) fn matmul_at_b<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: `a` is k×m row-major, read with swapped strides.
    unsafe {
        T::gemm(
            m, k, n, T::one(), a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, T::zero(),
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m×n] = a · bᵀ` where `b` is stored row-major as n×k.
pub(crate) fn matmul_a_bt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: `b` is n×k row-major, read with swapped strides.
    unsafe {
        T::gemm(
            m, k, n, T::one(), a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, T::zero(),
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn check_conv(x: Shape, weight: Shape) -> Result<()> {
    if weight.c != x.c {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: x,
            rhs: weight,
        });
    }
    Ok(())
}

/// Standard convolution. `weight` is (C_out, C_in, kH, kW).
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    check_conv(x.shape(), ws)?;
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::invalid("conv2d", format!("bias length {} for {} filters", b.len(), ws.n)));
        }
    }
    let g = Geometry::new(x.shape(), ws.h, ws.w, stride, padding)?;
    let cout = ws.n;
    let out_shape = Shape::new(x.shape().n, cout, g.oh, g.ow);
    let per_out = cout * g.out_plane();
    let mut out = vec![T::zero(); out_shape.numel()];

    out.par_chunks_mut(per_out.max(1)).enumerate().for_each(|(n, dst)| {
        let src = x.sample(n);
        if g.is_pointwise() {
            matmul(cout, g.patch(), g.out_plane(), weight.data(), src, dst, false);
        } else {
            let mut cols = vec![T::zero(); g.patch() * g.out_plane()];
            im2col(&g, src, &mut cols);
            matmul(cout, g.patch(), g.out_plane(), weight.data(), &cols, dst, false);
        }
        if let Some(b) = bias {
            for (o, plane) in dst.chunks_exact_mut(g.out_plane()).enumerate() {
                for v in plane {
                    *v = *v + b[o];
                }
            }
        }
    });
    let out = Tensor::from_parts(out_shape, out);
    out.check_finite("conv2d")?;
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of [`conv2d`] given the forward input and upstream gradient.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let ws = weight.shape();
    check_conv(x.shape(), ws)?;
    let g = Geometry::new(x.shape(), ws.h, ws.w, stride, padding)?;
    let cout = ws.n;
    let expect = Shape::new(x.shape().n, cout, g.oh, g.ow);
    if grad_out.shape() != expect {
        return Err(Error::Shape {
            op: "conv2d_backward",
            lhs: expect,
            rhs: grad_out.shape(),
        });
    }
    let k = g.patch();
    let p = g.out_plane();
    let per_in = g.cin * g.h * g.w;

    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..x.shape().n)
        .into_par_iter()
        .map(|n| {
            let gy = grad_out.sample(n);
            let src = x.sample(n);
            let mut gw = vec![T::zero(); cout * k];
            let mut gx = vec![T::zero(); per_in];
            if g.is_pointwise() {
                matmul_a_bt(cout, p, k, gy, src, &mut gw);
                matmul_at_b(k, cout, p, weight.data(), gy, &mut gx);
            } else {
                let mut cols = vec![T::zero(); k * p];
                im2col(&g, src, &mut cols);
                matmul_a_bt(cout, p, k, gy, &cols, &mut gw);
                matmul_at_b(k, cout, p, weight.data(), gy, &mut cols);
                col2im(&g, &cols, &mut gx);
            }
            (gx, gw)
        })
        .collect();

    let mut gx = Vec::with_capacity(x.len());
    let mut gw = vec![T::zero(); cout * k];
    for (sx, sw) in per_sample {
        gx.extend_from_slice(&sx);
        for (a, b) in gw.iter_mut().zip(sw) {
            *a = *a + b;
        }
    }
    let mut gb = vec![T::zero(); cout];
    for n in 0..x.shape().n {
        for (o, acc) in gb.iter_mut().enumerate() {
            *acc = grad_out.plane(n, o).iter().fold(*acc, |s, &v| s + v);
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(x.shape(), gx),
        weight: Tensor::from_parts(ws, gw),
        bias: gb,
    })
}

/// Per-channel convolution. `weight` is (C, 1, kH, kW); no channel mixing.
pub fn depthwise_conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.n != xs.c || ws.c != 1 {
        return Err(Error::Shape {
            op: "depthwise_conv2d",
            lhs: xs,
            rhs: ws,
        });
    }
    let g = Geometry::new(xs, ws.h, ws.w, stride, padding)?;
    let out_shape = Shape::new(xs.n, xs.c, g.oh, g.ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    let kk = g.kh * g.kw;
    out.par_chunks_mut(g.out_plane()).enumerate().for_each(|(idx, dst)| {
        let (n, c) = (idx / xs.c, idx % xs.c);
        let src = x.plane(n, c);
        let taps = &weight.data()[c * kk..(c + 1) * kk];
        for i in 0..g.kh {
            let (oh0, oh1) = tap_range(g.h, g.oh, g.stride, g.pad_h, i);
            for j in 0..g.kw {
                let wv = taps[i * g.kw + j];
                let (ow0, ow1) = tap_range(g.w, g.ow, g.stride, g.pad_w, j);
                for oh in oh0..oh1 {
                    let ih = oh * g.stride + i - g.pad_h;
                    let src_row = &src[ih * g.w..(ih + 1) * g.w];
                    let dst_row = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    if ow0 == ow1 {
                        continue;
                    }
                    if g.stride == 1 {
                        let off = j as isize - g.pad_w as isize;
                        let s = &src_row[(ow0 as isize + off) as usize..(ow1 as isize + off) as usize];
                        for (d, &v) in dst_row[ow0..ow1].iter_mut().zip(s) {
                            *d = *d + wv * v;
                        }
                    } else {
                        for ow in ow0..ow1 {
                            dst_row[ow] = dst_row[ow] + wv * src_row[ow * g.stride + j - g.pad_w];
                        }
                    }
                }
            }
        }
    });
    let out = Tensor::from_parts(out_shape, out);
    out.check_finite("depthwise_conv2d")?;
    Ok(out)
}

pub struct DepthwiseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
}

pub fn depthwise_conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<DepthwiseGrads<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.n != xs.c || ws.c != 1 {
        return Err(Error::Shape {
            op: "depthwise_conv2d_backward",
            lhs: xs,
            rhs: ws,
        });
    }
    let g = Geometry::new(xs, ws.h, ws.w, stride, padding)?;
    let expect = Shape::new(xs.n, xs.c, g.oh, g.ow);
    if grad_out.shape() != expect {
        return Err(Error::Shape {
            op: "depthwise_conv2d_backward",
            lhs: expect,
            rhs: grad_out.shape(),
        });
    }
    let kk = g.kh * g.kw;
    let mut gx = vec![T::zero(); xs.numel()];
    // per (n, c) weight gradients, reduced over n afterwards in fixed order
    let mut gw_parts = vec![T::zero(); xs.n * xs.c * kk];
    gx.par_chunks_mut(g.h * g.w)
        .zip(gw_parts.par_chunks_mut(kk))
        .enumerate()
        .for_each(|(idx, (gx_plane, gw))| {
            let (n, c) = (idx / xs.c, idx % xs.c);
            let src = x.plane(n, c);
            let gy = grad_out.plane(n, c);
            let taps = &weight.data()[c * kk..(c + 1) * kk];
            for i in 0..g.kh {
                let (oh0, oh1) = tap_range(g.h, g.oh, g.stride, g.pad_h, i);
                for j in 0..g.kw {
                    let wv = taps[i * g.kw + j];
                    let (ow0, ow1) = tap_range(g.w, g.ow, g.stride, g.pad_w, j);
                    let mut acc = T::zero();
                    for oh in oh0..oh1 {
                        let ih = oh * g.stride + i - g.pad_h;
                        for ow in ow0..ow1 {
                            let iw = ow * g.stride + j - g.pad_w;
                            let gyv = gy[oh * g.ow + ow];
                            acc = acc + src[ih * g.w + iw] * gyv;
                            gx_plane[ih * g.w + iw] = gx_plane[ih * g.w + iw] + wv * gyv;
                        }
                    }
                    gw[i * g.kw + j] = acc;
                }
            }
        });
    let mut gw = vec![T::zero(); xs.c * kk];
    for n in 0..xs.n {
        for (a, &b) in gw.iter_mut().zip(&gw_parts[n * xs.c * kk..(n + 1) * xs.c * kk]) {
            *a = *a + b;
        }
    }
    Ok(DepthwiseGrads {
        input: Tensor::from_parts(xs, gx),
        weight: Tensor::from_parts(ws, gw),
    })
}
