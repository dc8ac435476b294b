//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! Training runs in f32; a f64 mode backs the finite-difference gradient
//! checks. Everything model-shaped in this crate is generic over [`Scalar`]
//! so the same forward code serves both.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, primitive_battery, rel_err, GradCheckReport};
pub use params::{merge_grads, scale_grads, AdamConfig, Graph, ParamError, ParamStore};
pub use tape::{backward, Gradients, NodeId, Tape};

/// Element type for tensors: f32 for training, f64 for gradient checking.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn powi(self, n: i32) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense row-major tensor. Plain value type; tape participation happens
/// through the [`NodeId`] a [`Tape`] hands out when the tensor is recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Panics if `data.len()` does not match the shape product or any
    /// dimension is zero.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&d| d >= 1),
            "tensor dims must be >= 1, got {shape:?}"
        );
        assert_eq!(
            data.len(),
            numel,
            "shape {shape:?} expects {numel} elements, got {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![F::ZERO; n])
    }

    pub fn scalar(v: F) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<F>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map_to_f64(&self) -> Tensor<f64> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| v.to_f64()).collect(),
        )
    }

    pub fn map_from_f64(t: &Tensor<f64>) -> Tensor<F> {
        Tensor::new(
            t.shape.clone(),
            t.data.iter().map(|&v| F::from_f64(v)).collect(),
        )
    }
}

/// Matrix multiply on raw slices: a\[m,k\] * b\[k,n\] -> \[m,n\].
/// ikj loop order keeps the inner loop contiguous for both b and out.
pub(crate) fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
    out
}
