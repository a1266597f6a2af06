//! Dense row-major tensors of 32-bit reals.

use crate::error::{Error, Result};

/// A dense tensor: a shape and a flat row-major `f32` buffer.
///
/// Public constructors reject non-finite elements and shape/length
/// mismatches, so a `Tensor` obtained through the public API always holds
/// finite data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid_input(format!(
                "tensor shape must be non-empty positive dims, got {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::invalid_input(format!(
                "shape {shape:?} implies {expect} elements, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid_input(format!(
                "tensor contains non-finite element {bad}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 1-D tensor from a finite vector.
    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
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

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// Squared l2 norm, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| v as f64 * v as f64).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    /// l2 distance to another tensor of the same length.
    pub fn dist(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "dist: length mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}
