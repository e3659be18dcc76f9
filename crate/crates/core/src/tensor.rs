//! Dense row-major tensors.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("tensor shape must have at least one axis")]
    EmptyShape,
    #[error("axis {axis} has extent 0; every extent must be at least 1")]
    ZeroExtent { axis: usize },
    #[error("shape {shape:?} holds {expected} elements but {found} values were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
}

/// Number of elements described by `shape`.
pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(TensorError::ZeroExtent { axis });
    }
    Ok(())
}

/// Shape plus contiguous data, last axis fastest.
///
/// Equality via `PartialEq` follows IEEE comparison (so `NaN != NaN`); use
/// [`Tensor::bit_identical`] when comparing corrupted values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        check_shape(&shape)?;
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Rank-1 tensor over `data`.
    pub fn from_vec(data: Vec<T>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Result<Self, TensorError> {
        check_shape(&shape)?;
        let n = element_count(&shape);
        Ok(Self {
            shape,
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::filled(shape, T::zero())
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false for a valid tensor; present for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    /// Raw words of every element, in order.
    pub fn words(&self) -> impl Iterator<Item = u64> + '_ {
        self.data.iter().map(|v| v.to_word())
    }

    /// Shape equality plus bitwise equality of every element.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.shape == other.shape && self.words().eq(other.words())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::cast_from(v)).collect(),
        }
    }
}
