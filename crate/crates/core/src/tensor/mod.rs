//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! Everything the encoder and the loss terms need is expressed as row-major
//! matrices (vectors are `1 × n`). The [`Tape`] records each primitive as it
//! is evaluated; [`Tape::backward`] sweeps it once in reverse.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, CoordinateFailure, GradCheckError, GradCheckReport};
pub use tape::{CustomOp, Gradients, NodeId, Tape};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("empty input")]
    Empty,
}

/// A dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix; every axis but the last is
    /// folded into rows.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax of `x / temperature`.
pub fn softmax(x: &[f64], temperature: f64) -> Result<Vec<f64>, TensorError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(TensorError::BadTemperature(temperature));
    }
    if x.is_empty() {
        return Err(TensorError::Empty);
    }
    if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(TensorError::NonFinite { index, value });
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, temperature, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(x: &[f64], temperature: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);

        // e^1 / (e^1 + e^0), evaluated termwise.
        let e = 1f64.exp();
        let p = softmax(&[2.0, 0.0], 2.0).unwrap();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert_eq!(
            softmax(&[1.0], 0.0),
            Err(TensorError::BadTemperature(0.0))
        );
        assert!(softmax(&[1.0], -1.0).is_err());
        assert!(matches!(
            softmax(&[1.0, f64::NAN], 1.0),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
        assert!(softmax(&[f64::INFINITY], 1.0).is_err());
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    mod props {
        use super::super::softmax;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_normalized_and_shift_invariant(
                x in prop::collection::vec(-20.0f64..20.0, 1..16),
                c in -50.0f64..50.0,
                t in 0.1f64..10.0,
            ) {
                let p = softmax(&x, t).unwrap();
                let s: f64 = p.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&v| v > 0.0));
                let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
                let q = softmax(&shifted, t).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
