//! Dense n-dimensional tensors and reverse-mode automatic differentiation.
//!
//! All arithmetic is f64. `Tensor` is plain data; differentiable computation
//! runs through a [`Tape`], which records primitive ops and replays them in
//! reverse. Rectifier backward behaviour is selectable per backward pass
//! (standard, deconv, guided), which the saliency methods rely on.

mod adam;
mod conv;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use conv::{conv2d_direct, conv2d_im2col, conv_output_dims};
pub use tape::{bce, sigmoid, BackwardRule, Gradients, NodeId, Tape};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major f64 tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar_value(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape wants {n} elements, data has {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    /// Scalar view of a one-element tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarLoss {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::InvalidShape {
                op: "dims2",
                shape: self.shape.clone(),
                reason: "expected rank-2 tensor".into(),
            }),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::InvalidShape {
                op: "dims4",
                shape: self.shape.clone(),
                reason: "expected rank-4 tensor".into(),
            }),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major stacking of equally shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or(Error::EmptyDataset)?;
    let mut shape = Vec::with_capacity(first.shape.len() + 1);
    shape.push(items.len());
    shape.extend_from_slice(&first.shape);
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape != first.shape {
            return Err(Error::ShapeMismatch {
                op: "stack",
                lhs: first.shape.clone(),
                rhs: t.shape.clone(),
            });
        }
        data.extend_from_slice(&t.data);
    }
    Tensor::from_vec(&shape, data)
}
