//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! A [`Tensor`] is an immutable row-major buffer with a shape. Values that
//! take part in differentiation live on a [`Tape`] and are addressed through
//! [`Var`] handles; gradient buffers belong to the tape's leaves rather than
//! to the tensors themselves.

mod conv;
mod gradcheck;
mod ops;
mod tape;

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

pub use conv::{Padding, PaddingMode};
pub use gradcheck::{central_difference, gradcheck, DEFAULT_STEP};
pub use tape::{Tape, Var, VectorJacobian};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("log of non-positive value {value} at index {index}")]
    LogDomain { index: usize, value: f64 },
    #[error("division by zero at index {index}")]
    DivisionByZero { index: usize },
    #[error("fractional power of negative value {value} at index {index}")]
    PowDomain { index: usize, value: f64 },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("reduction over an empty axis set")]
    EmptyReduction,
    #[error("invalid convolution: {0}")]
    InvalidConv(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("{0}")]
    Domain(&'static str),
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor. All stored values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::LengthMismatch { shape, len: data.len() });
        }
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    /// Rank-0 tensor. Panics on a non-finite value.
    pub fn scalar(value: f64) -> Self {
        assert!(value.is_finite(), "non-finite scalar {value}");
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "non-finite fill {value}");
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn from_fn(
        shape: &[usize],
        f: impl FnMut(usize) -> f64,
    ) -> Result<Self, TensorError> {
        let data = (0..numel(shape)).map(f).collect();
        Self::new(shape.to_vec(), data)
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::LengthMismatch { shape: shape.to_vec(), len: self.data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn check_finite(data: &[f64]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { index, value: data[index] }),
        None => Ok(()),
    }
}
