//! Dense arrays and a reverse-mode differentiation tape over them.
//!
//! Every differentiable quantity in the crate (renderer inputs, encoder
//! activations, losses) lives on a [`Tape`]. Forward values are computed
//! eagerly when an op is recorded; [`Tape::backward`] replays the record in
//! reverse creation order, which is a valid reverse topological order
//! because ops can only consume values that already exist.

mod gradcheck;
pub mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use gradcheck::{grad_check, GradCheckReport, ParamReport};
pub use tape::{CustomOp, Gradients, Tape, Var};

/// Floating-point element type of a tape. `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        if m == 0 || n == 0 {
            return;
        }
        assert!(c.len() >= m * n);
        // SAFETY: callers pass slices whose extents match the strides; the
        // asserts in `kernels` guard the lengths.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        if m == 0 || n == 0 {
            return;
        }
        assert!(c.len() >= m * n);
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

/// A row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel(shape)] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&x| T::c(x)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::c(x.f64())).collect() }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
