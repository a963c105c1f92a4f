//! 2-D convolution in three geometries: extent-preserving ("affine"),
//! stride-2 downsampling, and stride-2 transposed upsampling.
//!
//! All three share one index relation between a "large" and a "small" grid,
//!
//! ```text
//! large = small * stride + tap - pad,    pad = (k - 1) / 2
//! ```
//!
//! For affine and down convolutions the input is the large side and the
//! output the small side; an up convolution is the exact adjoint geometry.
//! Forward and backward are implemented with im2col and one GEMM per batch
//! item, in a fixed order, so results are bit-reproducible.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Mat};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// Stride 1, spatial extent preserved. Requires an odd kernel.
    Affine,
    /// Stride 2, halves height and width. Requires even input extents.
    Down,
    /// Transposed stride 2, doubles height and width.
    Up,
}

impl ConvMode {
    pub fn stride(self) -> usize {
        match self {
            ConvMode::Affine => 1,
            ConvMode::Down | ConvMode::Up => 2,
        }
    }
}

/// Convolution weights `(out_ch, in_ch, k, k)` and bias `(1, out_ch, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub weight: Tensor,
    pub bias: Tensor,
    pub mode: ConvMode,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvKernel {
    /// Zero-initialised kernel.
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, mode: ConvMode) -> Result<Self> {
        Self::from_parts(
            Tensor::zeros([out_ch, in_ch, k, k]),
            Tensor::zeros([1, out_ch, 1, 1]),
            mode,
        )
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, mode: ConvMode) -> Result<Self> {
        let [out_ch, _, kh, kw] = weight.shape();
        if kh != kw || kh == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel must be square and non-empty, got {kh}x{kw}"
            )));
        }
        if mode == ConvMode::Affine && kh % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "affine convolution needs an odd kernel to preserve extent, got {kh}"
            )));
        }
        if bias.shape() != [1, out_ch, 1, 1] {
            return Err(Error::shape(
                "conv kernel",
                format!("bias {:?} for {} output channels", bias.shape(), out_ch),
            ));
        }
        Ok(ConvKernel { weight, bias, mode })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.mode.stride()
    }

    fn geometry(&self) -> Geometry {
        let k = self.kernel_size();
        Geometry {
            k,
            stride: self.stride(),
            pad: (k - 1) / 2,
        }
    }

    /// Output shape for `input`, or a diagnostic if the input is incompatible.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let [n, c, h, w] = input;
        if c != self.in_channels() {
            return Err(Error::shape(
                "conv_forward",
                format!("input has {} channels, kernel expects {}", c, self.in_channels()),
            ));
        }
        let (oh, ow) = match self.mode {
            ConvMode::Affine => (h, w),
            ConvMode::Down => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape(
                        "conv_forward",
                        format!("downsampling needs even extents, got {h}x{w}"),
                    ));
                }
                (h / 2, w / 2)
            }
            ConvMode::Up => (h * 2, w * 2),
        };
        Ok([n, self.out_channels(), oh, ow])
    }

    /// Weights as a (small_ch, large_ch * k * k) row-major matrix.
    fn small_large_weights(&self) -> Cow<'_, [f64]> {
        match self.mode {
            ConvMode::Affine | ConvMode::Down => Cow::Borrowed(self.weight.data()),
            ConvMode::Up => Cow::Owned(swap_channel_axes(self.weight.data(), self.weight.shape())),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Transposes the first two axes of a (a, b, k, k) array.
fn swap_channel_axes(src: &[f64], shape: Shape) -> Vec<f64> {
    let [a, b, kh, kw] = shape;
    let kk = kh * kw;
    let mut dst = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * kk;
            let d = (j * a + i) * kk;
            dst[d..d + kk].copy_from_slice(&src[s..s + kk]);
        }
    }
    dst
}

/// Range of small indices whose `small * stride + tap - pad` lands in `0..large`.
fn valid_range(g: Geometry, tap: usize, small: usize, large: usize) -> (usize, usize) {
    let offset = tap as isize - g.pad as isize;
    let s = g.stride as isize;
    // smallest o with o*s + offset >= 0
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    // largest o with o*s + offset <= large - 1
    let hi_excl = if large as isize - 1 - offset < 0 {
        0
    } else {
        (large as isize - 1 - offset) / s + 1
    };
    let lo = lo as usize;
    let hi = (hi_excl.max(0) as usize).min(small);
    (lo.min(hi), hi)
}

/// Unfolds the large grid into columns: row `(c*k + kh)*k + kw`, column `oy*ws + ox`.
fn im2col(large: &[f64], channels: usize, hl: usize, wl: usize, hs: usize, ws: usize, g: Geometry, cols: &mut [f64]) {
    let k = g.k;
    let plane = hs * ws;
    for c in 0..channels {
        let src = &large[c * hl * wl..(c + 1) * hl * wl];
        for kh in 0..k {
            let (ylo, yhi) = valid_range(g, kh, hs, hl);
            for kw in 0..k {
                let (xlo, xhi) = valid_range(g, kw, ws, wl);
                let row = &mut cols[((c * k + kh) * k + kw) * plane..][..plane];
                row.iter_mut().for_each(|v| *v = 0.0);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + kh - g.pad;
                    let dst = &mut row[oy * ws..(oy + 1) * ws];
                    let src_row = &src[iy * wl..(iy + 1) * wl];
                    if g.stride == 1 {
                        let ix0 = xlo + kw - g.pad;
                        dst[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src_row[ox * g.stride + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the large grid.
fn col2im(cols: &[f64], channels: usize, hl: usize, wl: usize, hs: usize, ws: usize, g: Geometry, large: &mut [f64]) {
    let k = g.k;
    let plane = hs * ws;
    for c in 0..channels {
        let dst = &mut large[c * hl * wl..(c + 1) * hl * wl];
        for kh in 0..k {
            let (ylo, yhi) = valid_range(g, kh, hs, hl);
            for kw in 0..k {
                let (xlo, xhi) = valid_range(g, kw, ws, wl);
                let row = &cols[((c * k + kh) * k + kw) * plane..][..plane];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + kh - g.pad;
                    let src = &row[oy * ws..(oy + 1) * ws];
                    let dst_row = &mut dst[iy * wl..(iy + 1) * wl];
                    if g.stride == 1 {
                        let ix0 = xlo + kw - g.pad;
                        for (d, s) in dst_row[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&src[xlo..xhi]) {
                            *d += s;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst_row[ox * g.stride + kw - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}

/// Discrete cross-correlation plus bias.
pub fn conv_forward(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let out_shape = kernel.output_shape(input.shape())?;
    let [n, cin, h, w] = input.shape();
    let [_, cout, oh, ow] = out_shape;
    let g = kernel.geometry();
    let kk = g.k * g.k;
    let weights = kernel.small_large_weights();
    let mut out = Tensor::zeros(out_shape);

    match kernel.mode {
        ConvMode::Affine | ConvMode::Down => {
            let mut cols = vec![0.0; cin * kk * oh * ow];
            for b in 0..n {
                im2col(input.item(b), cin, h, w, oh, ow, g, &mut cols);
                let dst = out.item_mut(b);
                gemm(
                    Mat::new(&weights, cout, cin * kk),
                    Mat::new(&cols, cin * kk, oh * ow),
                    0.0,
                    dst,
                );
                add_bias(dst, kernel.bias.data(), oh * ow);
            }
        }
        ConvMode::Up => {
            let mut cols = vec![0.0; cout * kk * h * w];
            for b in 0..n {
                gemm(
                    Mat::new(&weights, cin, cout * kk).t(),
                    Mat::new(input.item(b), cin, h * w),
                    0.0,
                    &mut cols,
                );
                let dst = out.item_mut(b);
                col2im(&cols, cout, oh, ow, h, w, g, dst);
                add_bias(dst, kernel.bias.data(), oh * ow);
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss with respect to a convolution's input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv_backward(output_grad: &Tensor, saved_input: &Tensor, kernel: &ConvKernel) -> Result<ConvGrads> {
    let out_shape = kernel.output_shape(saved_input.shape())?;
    if output_grad.shape() != out_shape {
        return Err(Error::shape(
            "conv_backward",
            format!(
                "output gradient {:?}, forward output {:?}",
                output_grad.shape(),
                out_shape
            ),
        ));
    }
    let [n, cin, h, w] = saved_input.shape();
    let [_, cout, oh, ow] = out_shape;
    let g = kernel.geometry();
    let kk = g.k * g.k;
    let weights = kernel.small_large_weights();

    let mut input_grad = Tensor::zeros(saved_input.shape());
    let mut weight_grad = vec![0.0; kernel.weight.len()];
    let mut bias_grad = vec![0.0; cout];

    match kernel.mode {
        ConvMode::Affine | ConvMode::Down => {
            let mut cols = vec![0.0; cin * kk * oh * ow];
            let mut cols_grad = vec![0.0; cin * kk * oh * ow];
            for b in 0..n {
                let go = output_grad.item(b);
                im2col(saved_input.item(b), cin, h, w, oh, ow, g, &mut cols);
                gemm(
                    Mat::new(go, cout, oh * ow),
                    Mat::new(&cols, cin * kk, oh * ow).t(),
                    1.0,
                    &mut weight_grad,
                );
                gemm(
                    Mat::new(&weights, cout, cin * kk).t(),
                    Mat::new(go, cout, oh * ow),
                    0.0,
                    &mut cols_grad,
                );
                col2im(&cols_grad, cin, h, w, oh, ow, g, input_grad.item_mut(b));
            }
        }
        ConvMode::Up => {
            let mut cols = vec![0.0; cout * kk * h * w];
            let mut sl_grad = vec![0.0; kernel.weight.len()];
            for b in 0..n {
                im2col(output_grad.item(b), cout, oh, ow, h, w, g, &mut cols);
                gemm(
                    Mat::new(saved_input.item(b), cin, h * w),
                    Mat::new(&cols, cout * kk, h * w).t(),
                    1.0,
                    &mut sl_grad,
                );
                gemm(
                    Mat::new(&weights, cin, cout * kk),
                    Mat::new(&cols, cout * kk, h * w),
                    0.0,
                    input_grad.item_mut(b),
                );
            }
            let [co, ci, k1, k2] = kernel.weight.shape();
            weight_grad = swap_channel_axes(&sl_grad, [ci, co, k1, k2]);
        }
    }

    let plane = oh * ow;
    for b in 0..n {
        let go = output_grad.item(b);
        for (c, acc) in bias_grad.iter_mut().enumerate() {
            *acc += go[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
    }

    Ok(ConvGrads {
        input: input_grad,
        weight: Tensor::from_vec(kernel.weight.shape(), weight_grad)?,
        bias: Tensor::vector(bias_grad),
    })
}
