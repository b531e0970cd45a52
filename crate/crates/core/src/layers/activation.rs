use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu6<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    // split on sign so exp never overflows
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Softmax across the channel axis, independently for every pixel.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let mut out = x.clone();
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(x.data()[base + c * p + i]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (x.data()[base + c * p + i] - m).exp();
                out.data_mut()[base + c * p + i] = e;
                z = z + e;
            }
            for c in 0..s.c {
                let v = &mut out.data_mut()[base + c * p + i];
                *v = *v / z;
            }
        }
    }
    out
}

fn check<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape(), data)
}

/// Derivative taken as 0 at exactly x = 0.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    check("relu_backward", x, grad_out)?;
    Ok(zip_map(x, grad_out, |v, g| if v > T::zero() { g } else { T::zero() }))
}

/// Pass-through on the open interval (0, 6).
pub fn relu6_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    check("relu6_backward", x, grad_out)?;
    let six = T::from_f64(6.0);
    Ok(zip_map(x, grad_out, |v, g| if v > T::zero() && v < six { g } else { T::zero() }))
}

/// Uses the forward output `y`.
pub fn sigmoid_backward<T: Element>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    check("sigmoid_backward", y, grad_out)?;
    Ok(zip_map(y, grad_out, |s, g| g * s * (T::one() - s)))
}

/// Uses the forward output `y`.
pub fn softmax_channels_backward<T: Element>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    check("softmax_backward", y, grad_out)?;
    let s = y.shape();
    let p = s.plane();
    let mut gx = grad_out.clone();
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let mut dot = T::zero();
            for c in 0..s.c {
                let k = base + c * p + i;
                dot = dot + y.data()[k] * grad_out.data()[k];
            }
            for c in 0..s.c {
                let k = base + c * p + i;
                gx.data_mut()[k] = y.data()[k] * (grad_out.data()[k] - dot);
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f32) -> Tensor {
        Tensor::full((1, 1, 1, 1), v)
    }

    #[test]
    fn clamp_and_sigmoid_points() {
        assert_eq!(relu6(&scalar(7.5)).data(), &[6.0]);
        assert_eq!(relu6(&scalar(-2.0)).data(), &[0.0]);
        assert_eq!(sigmoid(&scalar(0.0)).data(), &[0.5]);
        assert!(sigmoid(&scalar(-1000.0)).data()[0].is_finite());
    }

    #[test]
    fn relu_subgradient_convention() {
        let x = Tensor::new((1, 1, 1, 3), vec![-1.0f32, 0.0, 1.0]).unwrap();
        let g = Tensor::new((1, 1, 1, 3), vec![2.0f32, 2.0, 2.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric_pair_and_normalization() {
        let x = Tensor::full((1, 2, 1, 1), 0.3f32);
        assert_eq!(softmax_channels(&x).data(), &[0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn((2, 4, 3, 3), |_, _, _, _| rng.gen_range(-20.0f32..20.0));
        let y = softmax_channels(&x);
        for n in 0..2 {
            for i in 0..9 {
                let s: f32 = (0..4).map(|c| y.plane(n, c)[i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn output_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn((1, 3, 8, 8), |_, _, _, _| rng.gen_range(-30.0f32..30.0));
        assert!(relu6(&x).data().iter().all(|&v| (0.0..=6.0).contains(&v)));
        assert!(sigmoid(&x.map(|v| v / 10.0)).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
