//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! Ops are evaluated eagerly and recorded on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar output walks the recording in reverse and
//! accumulates adjoints for every leaf created with `requires_grad`.
//! [`check::grad_check`] verifies any recorded graph against central finite
//! differences.

mod backward;
pub mod check;
mod tape;

use std::fmt;

use num_traits::{Float, FromPrimitive};

pub use check::{grad_check, GradCheckReport};
pub use tape::{Op, Tape, Var};

/// Floating-point element type usable on a tape.
///
/// Correctness tests and gradient checks run in `f64`; training code may
/// instantiate tapes at `f32` where finite-difference tolerances don't apply.
pub trait Scalar:
    Float
    + FromPrimitive
    + std::ops::AddAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an `f64` literal into any [`Scalar`].
#[inline]
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal convertible to scalar type")
}

/// Errors surfaced by tape construction and evaluation.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("{op}: index out of range ({detail})")]
    IndexOutOfRange { op: &'static str, detail: String },
    #[error("array data length {len} does not match shape {shape:?}")]
    BadArray { len: usize, shape: Vec<usize> },
}

pub type Result<V> = std::result::Result<V, DiffError>;

/// Dense row-major array with a gradient-tracking flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(DiffError::BadArray { len: data.len(), shape });
        }
        Ok(Array { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Array { shape, data: vec![T::zero(); numel], requires_grad: false }
    }

    pub fn scalar(x: T) -> Self {
        Array { shape: vec![1], data: vec![x], requires_grad: false }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Array { shape: vec![data.len()], data, requires_grad: false }
    }

    /// Marks the array as a gradient target when used as a tape input.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when interpreted as a 2-D matrix.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix shape {:?}", self.shape);
        self.shape[0]
    }

    /// Number of columns when interpreted as a 2-D matrix.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }
}

/// Per-leaf adjoints produced by a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    by_var: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn new(n: usize) -> Self {
        Gradients { by_var: (0..n).map(|_| None).collect() }
    }

    pub(crate) fn slot(&mut self, var: Var) -> &mut Option<Vec<T>> {
        &mut self.by_var[var.index()]
    }

    /// Gradient of the backward target w.r.t. `var`, if `var` required one.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.by_var[var.index()].as_deref()
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.by_var[var.index()].take()
    }
}
