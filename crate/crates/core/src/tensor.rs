//! Dense row-major `f64` arrays.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by tensor construction and by graph primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite output produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
}

/// A dense n-dimensional array of 64-bit reals in row-major order.
///
/// `product(shape) == data.len()` always holds. A zero-dimensional shape
/// (`[]`) denotes a scalar holding one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// One-dimensional tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Two-dimensional tensor from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
