//! Bilinear 2× upsampling with half-pixel centers.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Per output index: the two source indices and the weight of the second.
fn axis_taps(input: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * input)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let src = src.max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_upsample2x<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::invalid("bilinear_upsample2x", format!("empty spatial extent in {s}")));
    }
    let rows = axis_taps(s.h);
    let cols = axis_taps(s.w);
    let out_shape = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for idx in 0..s.n * s.c {
        let src = &x.data()[idx * s.plane()..(idx + 1) * s.plane()];
        for &(r0, r1, fy) in &rows {
            let fy = T::from_f64(fy);
            for &(c0, c1, fx) in &cols {
                let fx = T::from_f64(fx);
                let top = src[r0 * s.w + c0] * (T::one() - fx) + src[r0 * s.w + c1] * fx;
                let bot = src[r1 * s.w + c0] * (T::one() - fx) + src[r1 * s.w + c1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Adjoint of [`bilinear_upsample2x`]: scatters each output gradient back to
/// its four source pixels.
pub fn bilinear_upsample2x_backward<T: Element>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input_shape;
    let expect = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    if grad_out.shape() != expect {
        return Err(Error::Shape {
            op: "bilinear_upsample2x_backward",
            lhs: expect,
            rhs: grad_out.shape(),
        });
    }
    let rows = axis_taps(s.h);
    let cols = axis_taps(s.w);
    let mut gx = vec![T::zero(); s.numel()];
    let op = expect.plane();
    for idx in 0..s.n * s.c {
        let g = &grad_out.data()[idx * op..(idx + 1) * op];
        let dst = &mut gx[idx * s.plane()..(idx + 1) * s.plane()];
        for (oy, &(r0, r1, fy)) in rows.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(c0, c1, fx)) in cols.iter().enumerate() {
                let fx = T::from_f64(fx);
                let v = g[oy * 2 * s.w + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                dst[r0 * s.w + c0] = dst[r0 * s.w + c0] + top * (T::one() - fx);
                dst[r0 * s.w + c1] = dst[r0 * s.w + c1] + top * fx;
                dst[r1 * s.w + c0] = dst[r1 * s.w + c0] + bot * (T::one() - fx);
                dst[r1 * s.w + c1] = dst[r1 * s.w + c1] + bot * fx;
            }
        }
    }
    Ok(Tensor::from_parts(s, gx))
}
