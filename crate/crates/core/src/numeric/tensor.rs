//! Dense row-major f64 tensor values.

use crate::rng::SplitMix64;
use crate::{Error, Result};
use std::sync::Arc;

/// An immutable dense tensor. Cloning is cheap (the buffer is shared).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} wants {expect} values, got {}", values.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(values),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
        }
    }

    /// Gaussian-initialized tensor with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut SplitMix64) -> Self {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.normal() * std).collect();
        Tensor {
            shape,
            data: Arc::new(values),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data viewed under a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Replace one coordinate, producing a new tensor (used by the
    /// finite-difference checker).
    pub fn with_value_at(&self, index: usize, v: f64) -> Self {
        let mut data = self.data.as_ref().clone();
        data[index] = v;
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }
}
