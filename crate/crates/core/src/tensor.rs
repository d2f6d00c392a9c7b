//! Dense f32 tensors in row-major order.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape {shape:?} has {expected} elements but data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {shape:?} contains a zero dimension")]
    ZeroDimension { shape: Vec<usize> },
    #[error("empty shape")]
    EmptyShape,
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
}

/// Dense rank-N tensor of 32-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDimension { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zero tensor is always valid")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Elementwise `a * x + y`; inputs are untouched.
    pub fn axpy(a: f32, x: &Tensor, y: &Tensor) -> Result<Tensor, TensorError> {
        if x.shape != y.shape {
            return Err(TensorError::ShapeMismatch {
                lhs: x.shape.clone(),
                rhs: y.shape.clone(),
            });
        }
        let data = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(&xv, &yv)| a * xv + yv)
            .collect();
        Tensor::new(x.shape.clone(), data)
    }

    /// Elementwise `x - y`.
    pub fn sub(x: &Tensor, y: &Tensor) -> Result<Tensor, TensorError> {
        Self::axpy(-1.0, y, x)
    }

    /// Elementwise `x + y`.
    pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor, TensorError> {
        Self::axpy(1.0, y, x)
    }
}
