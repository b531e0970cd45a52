//! Fully connected map on (N, C, 1, 1) tensors plus the per-channel gating
//! and pooling primitives the squeeze-and-excitation block is built from.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

use super::conv::{matmul_a_bt, matmul_at_b};

/// `y[n] = W · x[n] + b` with `weight` shaped (C_out, C_in).
pub fn dense<T: Element>(x: &Tensor<T>, weight: &[T], out_features: usize, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h != 1 || s.w != 1 || weight.len() != out_features * s.c {
        return Err(Error::invalid(
            "dense",
            format!("input {s} with a {}-element weight for {out_features} outputs", weight.len()),
        ));
    }
    if bias.is_some_and(|b| b.len() != out_features) {
        return Err(Error::invalid("dense", "bias length differs from output features"));
    }
    let mut out = vec![T::zero(); s.n * out_features];
    // out[N×O] = x[N×C] · Wᵀ
    matmul_a_bt(s.n, s.c, out_features, x.data(), weight, &mut out);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(out_features) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
    }
    let out = Tensor::from_parts(Shape::new(s.n, out_features, 1, 1), out);
    out.check_finite("dense")?;
    Ok(out)
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Element>(x: &Tensor<T>, weight: &[T], grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
    let s = x.shape();
    let o = grad_out.shape().c;
    if grad_out.shape() != Shape::new(s.n, o, 1, 1) || weight.len() != o * s.c {
        return Err(Error::Shape {
            op: "dense_backward",
            lhs: s,
            rhs: grad_out.shape(),
        });
    }
    let mut gx = vec![T::zero(); s.n * s.c];
    // gx[N×C] = gy[N×O] · W[O×C]
    super::conv::matmul(s.n, o, s.c, grad_out.data(), weight, &mut gx, false);
    let mut gw = vec![T::zero(); o * s.c];
    // gW[O×C] = gyᵀ · x
    matmul_at_b(o, s.n, s.c, grad_out.data(), x.data(), &mut gw);
    let mut gb = vec![T::zero(); o];
    for row in grad_out.data().chunks_exact(o) {
        for (a, &b) in gb.iter_mut().zip(row) {
            *a = *a + b;
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_parts(s, gx),
        weight: gw,
        bias: gb,
    })
}

/// `y[n,c,h,w] = x[n,c,h,w] · gate[n,c]` with `gate` shaped (N, C, 1, 1).
pub fn channel_scale<T: Element>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if gate.shape() != Shape::new(s.n, s.c, 1, 1) {
        return Err(Error::Shape {
            op: "channel_scale",
            lhs: s,
            rhs: gate.shape(),
        });
    }
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_exact_mut(s.plane()).enumerate() {
        let g = gate.data()[idx];
        for v in chunk {
            *v = *v * g;
        }
    }
    Ok(out)
}

pub fn channel_scale_backward<T: Element>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let gx = channel_scale(grad_out, gate)?;
    let p = x.shape().plane();
    let gg = x
        .data()
        .chunks_exact(p)
        .zip(grad_out.data().chunks_exact(p))
        .map(|(xs, gs)| xs.iter().zip(gs).fold(T::zero(), |a, (&u, &v)| a + u * v))
        .collect();
    Ok((gx, Tensor::from_parts(gate.shape(), gg)))
}

/// Adjoint of global average pooling: spreads each gradient evenly.
pub fn global_average_pool_backward<T: Element>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != Shape::new(input_shape.n, input_shape.c, 1, 1) {
        return Err(Error::Shape {
            op: "global_average_pool_backward",
            lhs: input_shape,
            rhs: grad_out.shape(),
        });
    }
    let p = input_shape.plane();
    let inv = T::one() / T::from_f64(p as f64);
    let mut data = Vec::with_capacity(input_shape.numel());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, p));
    }
    Ok(Tensor::from_parts(input_shape, data))
}
