use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
}

impl<T: Element> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running statistics of a standard normal.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::from_f64(BN_EPSILON),
            momentum: T::from_f64(BN_MOMENTUM),
        }
    }
}

/// Values kept from a training-mode forward for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, the value folded into the running estimate.
    pub batch_var_unbiased: Vec<T>,
}

fn check_channels<T: Element>(x: &Tensor<T>, c: usize) -> Result<()> {
    if x.shape().c != c {
        return Err(Error::invalid(
            "batchnorm",
            format!("{} parameters for input {}", c, x.shape()),
        ));
    }
    Ok(())
}

/// Normalizes with batch statistics over (N, H, W) per channel.
pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    epsilon: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let s = x.shape();
    check_channels(x, gamma.len())?;
    let m = s.n * s.plane();
    if m == 0 {
        return Err(Error::invalid("batchnorm", "empty batch"));
    }
    let mf = T::from_f64(m as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc = x.plane(n, c).iter().fold(acc, |a, &v| a + v);
        }
        let mu = acc / mf;
        let mut sq = T::zero();
        for n in 0..s.n {
            sq = x.plane(n, c).iter().fold(sq, |a, &v| a + (v - mu) * (v - mu));
        }
        mean[c] = mu;
        var[c] = sq / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
    let mut xhat = x.clone();
    let mut out = x.clone();
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * p;
            let xh = &mut xhat.data_mut()[start..start + p];
            for v in xh.iter_mut() {
                *v = (*v - mean[c]) * inv_std[c];
            }
            let o = &mut out.data_mut()[start..start + p];
            for (dst, &h) in o.iter_mut().zip(xhat.data()[start..start + p].iter()) {
                *dst = gamma[c] * h + beta[c];
            }
        }
    }
    out.check_finite("batchnorm")?;
    let bessel = if m > 1 { mf / T::from_f64((m - 1) as f64) } else { T::one() };
    Ok((
        out,
        BatchNormCache {
            normalized: xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var.iter().map(|&v| v * bessel).collect(),
        },
    ))
}

/// Running-statistics update after a training step.
pub fn update_running_stats<T: Element>(params: &mut BatchNormParams<T>, cache: &BatchNormCache<T>) {
    let mo = params.momentum;
    for c in 0..params.gamma.len() {
        params.running_mean[c] = mo * params.running_mean[c] + (T::one() - mo) * cache.batch_mean[c];
        params.running_var[c] = mo * params.running_var[c] + (T::one() - mo) * cache.batch_var_unbiased[c];
    }
}

/// Normalizes with the running statistics.
pub fn batchnorm_infer<T: Element>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    check_channels(x, p.gamma.len())?;
    let scale: Vec<T> = (0..s.c)
        .map(|c| p.gamma[c] / (p.running_var[c] + p.epsilon).sqrt())
        .collect();
    let shift: Vec<T> = (0..s.c).map(|c| p.beta[c] - p.running_mean[c] * scale[c]).collect();
    let mut out = x.clone();
    let plane = s.plane();
    for (idx, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let c = idx % s.c;
        for v in chunk {
            *v = *v * scale[c] + shift[c];
        }
    }
    out.check_finite("batchnorm")?;
    Ok(out)
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward of [`batchnorm_train`].
pub fn batchnorm_train_backward<T: Element>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let s = grad_out.shape();
    if s != cache.normalized.shape() {
        return Err(Error::Shape {
            op: "batchnorm_backward",
            lhs: cache.normalized.shape(),
            rhs: s,
        });
    }
    let mf = T::from_f64((s.n * s.plane()) as f64);
    let mut g_gamma = vec![T::zero(); s.c];
    let mut g_beta = vec![T::zero(); s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            for (&g, &h) in grad_out.plane(n, c).iter().zip(cache.normalized.plane(n, c)) {
                g_beta[c] = g_beta[c] + g;
                g_gamma[c] = g_gamma[c] + g * h;
            }
        }
    }
    let mut gx = grad_out.clone();
    let p = s.plane();
    for (idx, chunk) in gx.data_mut().chunks_exact_mut(p).enumerate() {
        let c = idx % s.c;
        let k = gamma[c] * cache.inv_std[c] / mf;
        let xh = &cache.normalized.data()[idx * p..(idx + 1) * p];
        for (g, &h) in chunk.iter_mut().zip(xh) {
            *g = k * (mf * *g - g_beta[c] - h * g_gamma[c]);
        }
    }
    Ok(BatchNormGrads {
        input: gx,
        gamma: g_gamma,
        beta: g_beta,
    })
}

/// Backward through inference-mode normalization (running stats fixed).
pub fn batchnorm_infer_backward<T: Element>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let s = x.shape();
    let inv: Vec<T> = p.running_var.iter().map(|&v| T::one() / (v + p.epsilon).sqrt()).collect();
    let mut g_gamma = vec![T::zero(); s.c];
    let mut g_beta = vec![T::zero(); s.c];
    let mut gx = grad_out.clone();
    let plane = s.plane();
    for (idx, chunk) in gx.data_mut().chunks_exact_mut(plane).enumerate() {
        let c = idx % s.c;
        let xs = &x.data()[idx * plane..(idx + 1) * plane];
        for (g, &xv) in chunk.iter_mut().zip(xs) {
            g_beta[c] = g_beta[c] + *g;
            g_gamma[c] = g_gamma[c] + *g * (xv - p.running_mean[c]) * inv[c];
            *g = *g * p.gamma[c] * inv[c];
        }
    }
    Ok(BatchNormGrads {
        input: gx,
        gamma: g_gamma,
        beta: g_beta,
    })
}
