//! Elementwise operators and their backward rules.

use super::Tensor;
use crate::error::{Error, Result};

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|x| x * s)
}

pub fn square(a: &Tensor) -> Tensor {
    a.map(|x| x * x)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|x| x.max(0.0))
}

pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Tensor {
    a.map(|x| x.clamp(lo, hi))
}

/// Elementwise square root; every element must be strictly positive.
pub fn sqrt(a: &Tensor) -> Result<Tensor> {
    if let Some((index, &value)) = a.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveSqrt { index, value });
    }
    Ok(a.map(f64::sqrt))
}

/// Gradient flows unchanged to both operands of `add`.
pub fn add_backward(grad: &Tensor) -> (Tensor, Tensor) {
    (grad.clone(), grad.clone())
}

pub fn sub_backward(grad: &Tensor) -> (Tensor, Tensor) {
    (grad.clone(), scale(grad, -1.0))
}

pub fn mul_backward(grad: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((mul(grad, b)?, mul(grad, a)?))
}

pub fn scale_backward(grad: &Tensor, s: f64) -> Tensor {
    scale(grad, s)
}

pub fn square_backward(grad: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad.zip_map(input, "square_backward", |g, x| 2.0 * x * g)
}

/// Takes the forward *output* of [`sqrt`].
pub fn sqrt_backward(grad: &Tensor, output: &Tensor) -> Result<Tensor> {
    grad.zip_map(output, "sqrt_backward", |g, y| g / (2.0 * y))
}

pub fn relu_backward(grad: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad.zip_map(input, "relu_backward", |g, x| if x > 0.0 { g } else { 0.0 })
}

/// Zero gradient wherever the forward pass clamped.
pub fn clamp_backward(grad: &Tensor, input: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    grad.zip_map(input, "clamp_backward", |g, x| if x > lo && x < hi { g } else { 0.0 })
}
