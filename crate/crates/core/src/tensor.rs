//! Rank-4 tensors in N, C, H, W row-major layout.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type a [`Tensor`] can hold.
///
/// Storage is `f32` everywhere; `f64` exists so gradient checks can run the
/// same kernels at higher precision.
pub trait Element: Float + Default + fmt::Debug + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// The strides and extents must describe memory inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Element for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_batch(self, n: usize) -> Self {
        Shape { n, ..self }
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub const fn is_empty(&self) -> bool {
        self.numel() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape { n, c, h, w }
    }
}

/// Immutable-at-the-interface rank-4 value. Every operation returns a new
/// tensor; nothing here mutates its inputs.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, rejecting a length mismatch or any non-finite value.
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "Tensor::new",
                format!("{} values for shape {}", data.len(), shape),
            ));
        }
        if shape.is_empty() && data.is_empty() && shape != Shape::new(0, 0, 0, 0) {
            // zero extents are reserved for the canonical empty tensor
            return Err(Error::invalid("Tensor::new", format!("zero extent in {shape}")));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Internal constructor for kernels that already guarantee the length.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn empty() -> Self {
        Tensor {
            shape: Shape::new(0, 0, 0, 0),
            data: Vec::new(),
        }
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::one())
    }

    /// Fills by calling `f(n, c, h, w)` in storage order.
    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    /// Contiguous H×W plane of one (sample, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Contiguous C×H×W block of one sample.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.c * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.shape.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Element-wise sum; shapes must match exactly.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "elementwise_add",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        let out = Tensor {
            shape: self.shape,
            data,
        };
        out.check_finite("elementwise_add")?;
        Ok(out)
    }

    /// Concatenates along the channel axis, `self` first.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self.shape, other.shape);
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::Shape {
                op: "concat_channels",
                lhs: a,
                rhs: b,
            });
        }
        let out_shape = Shape::new(a.n, a.c + b.c, a.h, a.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..a.n {
            data.extend_from_slice(self.sample(n));
            data.extend_from_slice(other.sample(n));
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Channels `[start, start + count)` of every sample.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        let s = self.shape;
        if start + count > s.c {
            return Err(Error::invalid(
                "slice_channels",
                format!("channels {start}..{} out of {}", start + count, s.c),
            ));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * count * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            data.extend_from_slice(&self.data[base..base + count * p]);
        }
        Ok(Tensor {
            shape: Shape::new(s.n, count, s.h, s.w),
            data,
        })
    }

    /// Mean over H×W for every (sample, channel); output is (N, C, 1, 1).
    pub fn global_average_pool(&self) -> Result<Self> {
        let s = self.shape;
        if s.plane() == 0 {
            return Err(Error::invalid("global_average_pool", format!("empty spatial extent in {s}")));
        }
        let inv = T::one() / T::from_f64(s.plane() as f64);
        let data = self
            .data
            .chunks_exact(s.plane())
            .map(|plane| plane.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
            .collect();
        Ok(Tensor {
            shape: Shape::new(s.n, s.c, 1, 1),
            data,
        })
    }

    /// Stacks tensors that share (C, H, W) along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Ok(Self::empty());
        };
        let per = first.shape.with_batch(1);
        let mut data = Vec::with_capacity(per.numel() * items.len());
        let mut n = 0;
        for t in items {
            if t.shape.with_batch(1) != per {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: first.shape,
                    rhs: t.shape,
                });
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: per.with_batch(n),
            data,
        })
    }

    /// Sample `n` as a batch-of-one tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        Tensor {
            shape: self.shape.with_batch(1),
            data: self.sample(n).to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: (usize, usize, usize, usize), v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_identity_and_hand_sum() {
        let x = Tensor::from_fn((1, 1, 2, 2), |_, _, h, w| (h * 2 + w) as f32 * 0.7 - 1.0);
        assert_eq!(Tensor::zeros((1, 1, 2, 2)).add(&x).unwrap(), x);
        let a = t((1, 1, 2, 2), &[1., 2., 3., 4.]);
        let b = t((1, 1, 2, 2), &[4., 3., 2., 1.]);
        assert_eq!(a.add(&b).unwrap().data(), &[5., 5., 5., 5.]);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let err = Tensor::<f32>::zeros((1, 2, 2, 2)).add(&Tensor::zeros((1, 1, 2, 2))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 2, 2, 2)") && msg.contains("(1, 1, 2, 2)"), "{msg}");
    }

    #[test]
    fn add_rejects_overflow_to_inf() {
        let a = Tensor::full((1, 1, 1, 1), f32::MAX);
        assert!(matches!(a.add(&a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(Tensor::<f32>::new((1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new((1, 1, 1, 1), vec![f32::NAN]).is_err());
        assert!(Tensor::<f32>::new((1, 0, 2, 2), vec![]).is_err());
        assert!(Tensor::<f32>::new((0, 0, 0, 0), vec![]).is_ok());
    }

    #[test]
    fn concat_shapes_and_order() {
        let a = Tensor::<f32>::zeros((1, 3, 4, 4));
        let b = Tensor::<f32>::zeros((1, 5, 4, 4));
        assert_eq!(a.concat_channels(&b).unwrap().shape(), Shape::new(1, 8, 4, 4));
        let one = Tensor::<f32>::ones((1, 1, 1, 1));
        let two = Tensor::full((1, 1, 1, 1), 2.0f32);
        assert_eq!(one.concat_channels(&two).unwrap().data(), &[1., 2.]);
        let c = Tensor::<f32>::zeros((1, 3, 2, 2));
        assert!(matches!(a.concat_channels(&c), Err(Error::Shape { .. })));
    }

    #[test]
    fn gap_examples() {
        assert_eq!(Tensor::full((2, 3, 4, 5), 1.25f32).global_average_pool().unwrap().data(), &[1.25; 6]);
        let x = t((1, 1, 2, 2), &[1., 2., 3., 4.]);
        assert_eq!(x.global_average_pool().unwrap().data(), &[2.5]);
        assert!(Tensor::<f32>::empty().global_average_pool().is_err());
    }

    #[test]
    fn gap_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn((2, 3, 5, 5), |_, _, _, _| rng.gen_range(-1.0f32..1.0));
        let got = x.global_average_pool().unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0f64;
                for h in 0..5 {
                    for w in 0..5 {
                        acc += x.at(n, c, h, w) as f64;
                    }
                }
                let want = acc / 25.0;
                assert!((got.at(n, c, 0, 0) as f64 - want).abs() < 1e-6);
            }
        }
    }

    fn arb_tensor(shape: Shape) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-100.0f32..100.0, shape.numel())
            .prop_map(move |v| Tensor::new(shape, v).unwrap())
    }

    proptest! {
        #[test]
        fn concat_then_slice_recovers_inputs(
            (a, b) in (1usize..3, 1usize..4, 1usize..4, 1usize..5, 1usize..5)
                .prop_flat_map(|(n, ca, cb, h, w)| (arb_tensor(Shape::new(n, ca, h, w)), arb_tensor(Shape::new(n, cb, h, w))))
        ) {
            let cat = a.concat_channels(&b).unwrap();
            prop_assert_eq!(cat.slice_channels(0, a.shape().c).unwrap(), a.clone());
            prop_assert_eq!(cat.slice_channels(a.shape().c, b.shape().c).unwrap(), b);
        }

        #[test]
        fn add_commutes_and_associates(
            (a, b, c) in (1usize..3, 1usize..3, 1usize..4, 1usize..4).prop_flat_map(|(n, ch, h, w)| {
                let s = Shape::new(n, ch, h, w);
                (arb_tensor(s), arb_tensor(s), arb_tensor(s))
            })
        ) {
            let a0 = a.clone();
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
            let l = a.add(&b).unwrap().add(&c).unwrap();
            let r = a.add(&b.add(&c).unwrap()).unwrap();
            // rounding error scales with the operands, not the (possibly cancelled) sum
            for (i, (x, y)) in l.data().iter().zip(r.data()).enumerate() {
                let scale = a.data()[i].abs() + b.data()[i].abs() + c.data()[i].abs();
                prop_assert!((x - y).abs() <= 1e-6 * scale.max(1.0));
            }
            prop_assert_eq!(a, a0);
        }
    }
}
