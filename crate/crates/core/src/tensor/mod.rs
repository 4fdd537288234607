//! Dense tensors with tape-based reverse-mode gradients, restricted to the
//! operations the WaveNet needs, plus Adam and a finite-difference checker.
//!
//! Everything is generic over [`Real`] so the same graph code runs in `f32`
//! for training and in `f64` as a shadow for gradient checking.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, GradMismatch};
pub use graph::{Gradients, Graph, LossEval, NodeId};
pub use kernels::Padding;
pub use params::{ParamId, ParamStore, ParamValues, Parameter, ShadowParams};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("backward called without a recorded forward pass")]
    NoForward,
    #[error("backward needs a scalar loss, got dims {0:?}")]
    NotScalar(Vec<usize>),
    #[error("adam step must be >= 1 (got {0})")]
    InvalidStep(u64),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
}

/// Floating point element type usable by the kernels.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + AddAssign + Send + Sync + 'static
{
    /// `C <- alpha * A * B + beta * C` over strided views.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds, non-overlapping
    /// (for `c`) matrices of the given sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to any Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![F::zero(); dims.iter().product()],
        }
    }

    pub fn full(dims: &[usize], value: F) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<F>) -> Result<Self, TensorError> {
        let expected: usize = dims.iter().product();
        if expected != data.len() || dims.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                expected: dims.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(dims, data.iter().map(|&v| F::of(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
