//! Scalable uniform scalar quantizer with stochastic rounding.
//!
//! For a channel `c` with bit depth `B` the grid has `2^B` levels:
//!
//! ```text
//! delta = (max - min) / (2^B - 1)
//! z     = clamp(round(-min / delta), 0, 2^B - 1)
//! q     = clamp(round(c / delta + u) + z, 0, 2^B - 1)
//! c_hat = delta * (q - z)
//! ```
//!
//! `u` is uniform noise on the open interval (-1/2, 1/2) in bin units for
//! stochastic rounding, and zero for deterministic rounding. The channel range
//! is widened to include zero so the zero-point always lies on the grid, and
//! the range is re-anchored to `[-z * delta, (2^B - 1 - z) * delta]` stored
//! as 32-bit floats. Encoder and decoder derive `delta` from those floats, so
//! both sides agree bit-for-bit and `c_hat(z) == 0` exactly.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const MAX_BITS: u8 = 8;

/// Per-channel quantizer parameters. A channel whose range collapses to a
/// single value is a constant channel (`cmin == cmax`, `delta == 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    pub bits: u8,
    pub delta: f64,
    pub zero_point: u8,
    pub cmin: f32,
    pub cmax: f32,
}

fn levels(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit depth must be in 1..=8, got {bits}"
        )));
    }
    Ok(())
}

impl QuantSpec {
    /// Rebuilds a spec from its serialized fields.
    pub fn from_wire(bits: u8, cmin: f32, cmax: f32, zero_point: u8) -> Result<Self> {
        check_bits(bits)?;
        if !cmin.is_finite() || !cmax.is_finite() || cmin > cmax {
            return Err(Error::InvalidArgument(format!(
                "invalid channel range [{cmin}, {cmax}]"
            )));
        }
        if zero_point as u32 > levels(bits) {
            return Err(Error::InvalidArgument(format!(
                "zero-point {zero_point} outside [0, {}]",
                levels(bits)
            )));
        }
        let delta = (cmax as f64 - cmin as f64) / levels(bits) as f64;
        Ok(QuantSpec {
            bits,
            delta,
            zero_point,
            cmin,
            cmax,
        })
    }

    pub fn is_constant(&self) -> bool {
        self.cmin == self.cmax
    }

    pub fn max_level(&self) -> u8 {
        levels(self.bits) as u8
    }
}

/// Derives `delta`, `z` and the re-anchored range from a channel's extrema.
pub fn derive_spec(channel: &[f64], bits: u8) -> Result<QuantSpec> {
    check_bits(bits)?;
    if channel.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot derive a quantizer for an empty channel".into(),
        ));
    }
    if channel.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("channel contains non-finite values".into()));
    }
    let lo = channel.iter().cloned().fold(0.0f64, f64::min);
    let hi = channel.iter().cloned().fold(0.0f64, f64::max);
    let top = levels(bits) as f64;
    let delta = (hi - lo) / top;
    if !(delta > 0.0) || (hi as f32) == (lo as f32) {
        return QuantSpec::from_wire(bits, 0.0, 0.0, 0);
    }
    let zero_bar = -lo / delta;
    let z = zero_bar.round().clamp(0.0, top);
    let cmin = (-z * delta) as f32;
    let cmax = ((top - z) * delta) as f32;
    QuantSpec::from_wire(bits, cmin, cmax, z as u8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rounding {
    /// `u == 0`: round half away from zero. Used for encoding.
    Nearest,
    /// `u ~ Uniform(-1/2, 1/2)` in bin units, reproducible from the seed.
    Stochastic { seed: u64 },
}

/// One quantized code-map channel.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedChannel {
    pub values: Vec<u8>,
    pub spec: QuantSpec,
}

/// Uniform sample on the open interval (-1/2, 1/2), symmetric about zero.
fn centered_uniform(rng: &mut impl RngCore) -> f64 {
    let k = (rng.next_u64() >> 12) as f64;
    (k + 0.5) * (1.0 / (1u64 << 52) as f64) - 0.5
}

/// Quantizes and reports which positions hit the grid boundary.
pub fn quantize_with_mask(channel: &[f64], spec: &QuantSpec, rounding: Rounding) -> (QuantizedChannel, Vec<bool>) {
    if spec.is_constant() {
        return (
            QuantizedChannel {
                values: vec![0; channel.len()],
                spec: *spec,
            },
            vec![false; channel.len()],
        );
    }
    let top = spec.max_level() as f64;
    let z = spec.zero_point as f64;
    let mut rng = match rounding {
        Rounding::Stochastic { seed } => Some(seed::rng(seed, &[])),
        Rounding::Nearest => None,
    };
    let mut clamped = Vec::with_capacity(channel.len());
    let values = channel
        .iter()
        .map(|&c| {
            let u = rng.as_mut().map_or(0.0, centered_uniform);
            let q = (c / spec.delta + u).round() + z;
            clamped.push(!(0.0..=top).contains(&q));
            q.clamp(0.0, top) as u8
        })
        .collect();
    (QuantizedChannel { values, spec: *spec }, clamped)
}

pub fn quantize(channel: &[f64], spec: &QuantSpec, rounding: Rounding) -> QuantizedChannel {
    quantize_with_mask(channel, spec, rounding).0
}

pub fn quantize_stochastic(channel: &[f64], spec: &QuantSpec, seed: u64) -> QuantizedChannel {
    quantize(channel, spec, Rounding::Stochastic { seed })
}

/// `delta * (q - z)`; a constant channel yields its literal value.
pub fn dequantize(q: &QuantizedChannel) -> Vec<f64> {
    let spec = &q.spec;
    if spec.is_constant() {
        return vec![spec.cmin as f64; q.values.len()];
    }
    let z = spec.zero_point as f64;
    q.values.iter().map(|&v| spec.delta * (v as f64 - z)).collect()
}

/// Straight-through gradient rule for quantize followed by dequantize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteMode {
    /// Identity Jacobian everywhere.
    #[default]
    Identity,
    /// Identity, except zero where the quantizer clamped to the grid boundary.
    MaskClamped,
}

pub fn ste_backward(output_grad: &Tensor, clamped: &[bool], mode: SteMode) -> Result<Tensor> {
    match mode {
        SteMode::Identity => Ok(output_grad.clone()),
        SteMode::MaskClamped => {
            if clamped.len() != output_grad.len() {
                return Err(Error::shape(
                    "ste_backward",
                    format!("{} mask entries for {} gradients", clamped.len(), output_grad.len()),
                ));
            }
            let mut g = output_grad.clone();
            for (v, &m) in g.data_mut().iter_mut().zip(clamped) {
                if m {
                    *v = 0.0;
                }
            }
            Ok(g)
        }
    }
}

/// Result of quantizing every (item, channel) plane of a code-map tensor.
#[derive(Clone, Debug)]
pub struct QuantizedTensor {
    /// Per-plane quantized channels in (item, channel) order.
    pub planes: Vec<QuantizedChannel>,
    /// Dequantized code map, same shape as the input.
    pub dequantized: Tensor,
    /// True where the quantizer clamped.
    pub clamped: Vec<bool>,
}

/// Quantizes each (item, channel) plane of `code` with its own spec. In
/// stochastic mode each plane draws from an independent stream keyed by `seed`.
pub fn quantize_tensor(code: &Tensor, bits: u8, rounding: Rounding) -> Result<QuantizedTensor> {
    let mut dequantized = Tensor::zeros(code.shape());
    let mut planes = Vec::with_capacity(code.batch() * code.channels());
    let mut clamped = Vec::with_capacity(code.len());
    for n in 0..code.batch() {
        for c in 0..code.channels() {
            let plane = code.plane(n, c);
            let spec = derive_spec(plane, bits)?;
            let plane_rounding = match rounding {
                Rounding::Nearest => Rounding::Nearest,
                Rounding::Stochastic { seed } => Rounding::Stochastic {
                    seed: seed::derive(seed, &[n as u64, c as u64]),
                },
            };
            let (q, mask) = quantize_with_mask(plane, &spec, plane_rounding);
            dequantized.plane_mut(n, c).copy_from_slice(&dequantize(&q));
            clamped.extend(mask);
            planes.push(q);
        }
    }
    Ok(QuantizedTensor {
        planes,
        dequantized,
        clamped,
    })
}
