//! Dense NCHW tensors and the differentiable operators the codec networks
//! are built from.
//!
//! Gradients are propagated explicitly: every operator has a forward function
//! and a backward function that takes the saved forward input. There is no
//! global graph; the networks keep their own tape of saved activations.

pub mod conv;
pub(crate) mod gemm;
pub mod ops;

use crate::error::{Error, Result};

pub use conv::{conv_backward, conv_forward, ConvGrads, ConvKernel, ConvMode};

/// Shape of a tensor as (batch, channels, height, width).
pub type Shape = [usize; 4];

/// A 4-D real-valued array in NCHW order with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {:?} ({} expected)", data.len(), shape, expected),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// A (1, n, 1, 1) tensor holding a per-channel vector.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: [1, values.len(), 1, 1],
            data: values,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Number of values in one (height, width) plane.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    /// All channels of batch item `n` as one contiguous slice.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape[1] * self.plane_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape[1] * self.plane_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copy of batch item `n` as a batch-of-one tensor.
    pub fn select(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.item(n).to_vec(),
            grad: None,
        }
    }

    /// Stack batch-of-one (or larger) tensors with identical C, H, W.
    pub fn concat_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(Error::shape(
                    "concat_batch",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} gradient values for {} parameters", delta.len(), self.data.len()),
            ));
        }
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            grad: None,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn ensure_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// (min, max, mean absolute value) for diagnostics.
    pub fn stats(&self) -> (f64, f64, f64) {
        let min = self.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean_abs = self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len().max(1) as f64;
        (min, max, mean_abs)
    }
}
