//! Dense-tensor numerical core with reverse-mode automatic differentiation.
//!
//! Every differentiable computation in the crate is expressed through a
//! [`Tape`]: the forward pass records primitive operations, `backward`
//! replays them in reverse and accumulates gradients into the leaf
//! [`Tensor`]s that were registered on the tape.
//!
//! The engine is generic over the element type: `f64` for tests and
//! finite-difference checks, `f32` for training throughput.

mod tape;

pub mod gradcheck;

pub use tape::{Tape, Var};

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::rc::Rc;

/// Element type the engine runs on. Implemented for `f32` and `f64`.
pub trait Real:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Default
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn is_nan(self) -> bool;

    /// `c = alpha * a @ b + beta * c` with explicit row/col strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
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
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maxv(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline]
            fn minv(self, other: Self) -> Self {
                self.min(other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn is_nan(self) -> bool {
                self.is_nan()
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A dense row-major matrix that can act as an autodiff leaf.
///
/// `grad` is an accumulator of the same extent as `data`; it stays all-zero
/// for tensors with `requires_grad == false`.
#[derive(Debug, Clone)]
pub struct Tensor<F: Real> {
    rows: usize,
    cols: usize,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        let n = data.len();
        Tensor {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: vec![F::ZERO; n],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![F::ZERO; rows * cols])
    }

    /// Leaf that will receive gradients during backward.
    pub fn param(rows: usize, cols: usize, data: Vec<F>) -> Self {
        let mut t = Self::new(rows, cols, data);
        t.requires_grad = true;
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = F::ZERO;
        }
    }
}

/// Shared handle to a leaf tensor: model parameters live behind these so the
/// tape, the optimizer, and checkpoint i/o can all reach the same storage.
/// Confined to one thread, like the tape itself.
pub type ParamRef<F> = Rc<RefCell<Tensor<F>>>;

pub fn param<F: Real>(rows: usize, cols: usize, data: Vec<F>) -> ParamRef<F> {
    Rc::new(RefCell::new(Tensor::param(rows, cols, data)))
}

/// Cosine similarity `u.v / (|u||v| + eps)` with `eps = 1e-8`.
///
/// Zero vectors score 0 instead of erroring; padded objects rely on this.
pub fn cosine<F: Real>(u: &[F], v: &[F]) -> crate::Result<F> {
    if u.len() != v.len() {
        return Err(crate::Error::dim("cosine", u.len(), v.len()));
    }
    let mut dot = F::ZERO;
    let mut nu = F::ZERO;
    let mut nv = F::ZERO;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    let denom = nu.sqrt() * nv.sqrt() + F::from_f64(COSINE_EPS);
    Ok(dot / denom)
}

/// Epsilon guard in every cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_a_vector_with_itself_is_one() {
        let x = [0.3f64, -1.2, 2.5];
        let c = cosine(&x, &x).unwrap();
        // epsilon in the denominator keeps this marginally below 1
        assert!((c - 1.0).abs() < 1e-7, "got {c}");
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let c = cosine(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn cosine_matches_direct_formula() {
        let c = cosine(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.70710678).abs() < 1e-7, "got {c}");
    }

    #[test]
    fn cosine_length_mismatch_is_a_dimension_error() {
        let err = cosine(&[1.0f64], &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension { .. }));
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        let c = cosine(&[0.0f64, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn tensor_grad_starts_zero_and_matches_len() {
        let t = Tensor::<f64>::param(2, 3, vec![1.0; 6]);
        assert_eq!(t.grad.len(), t.len());
        assert!(t.grad.iter().all(|&g| g == 0.0));
    }
}
