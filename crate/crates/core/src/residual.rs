//! Lossy coding of the enhancement residual `r = x - x'`.
//!
//! The residual is mapped linearly from `[rmin, rmax]` onto 8-bit levels,
//! then each channel is split into 8x8 blocks (edges replicated), level
//! shifted by -128, transformed with an orthonormal DCT and quantized with
//! `step = 2^((qp - 4) / 6)`. DC coefficients are coded as differences from
//! the previous block's DC in the same channel. Per block the coder sends the
//! count of coefficients up to the last non-zero one in zigzag order, then a
//! significance flag, sign and Exp-Golomb magnitude for each of them.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::entropy::{BitModel, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLOCK: usize = 8;
pub const QP_MIN: u8 = 1;
pub const QP_MAX: u8 = 51;
pub const HEADER_LEN: usize = 10;

const COEFFS: usize = BLOCK * BLOCK;
const BANDS: usize = 5;
const MAX_PREFIX: usize = 24;

/// Side information needed to invert the level mapping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualHeader {
    pub rmin: f32,
    pub rmax: f32,
    pub qp: u8,
    pub block: u8,
}

impl ResidualHeader {
    pub fn validate(&self) -> Result<()> {
        if !self.rmin.is_finite() || !self.rmax.is_finite() || self.rmin > self.rmax {
            return Err(Error::InvalidArgument(format!(
                "invalid residual range [{}, {}]",
                self.rmin, self.rmax
            )));
        }
        check_qp(self.qp)?;
        if self.block as usize != BLOCK {
            return Err(Error::InvalidArgument(format!("unsupported block size {}", self.block)));
        }
        Ok(())
    }

    pub fn is_constant(&self) -> bool {
        self.rmin == self.rmax
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&self.rmin.to_le_bytes());
        out[4..8].copy_from_slice(&self.rmax.to_le_bytes());
        out[8] = self.qp;
        out[9] = self.block;
        out
    }

    pub fn from_bytes(bytes: &[u8; HEADER_LEN]) -> Result<Self> {
        let header = ResidualHeader {
            rmin: f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")),
            rmax: f32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")),
            qp: bytes[8],
            block: bytes[9],
        };
        header.validate()?;
        Ok(header)
    }
}

fn check_qp(qp: u8) -> Result<()> {
    if !(QP_MIN..=QP_MAX).contains(&qp) {
        return Err(Error::InvalidArgument(format!(
            "qp must be in {QP_MIN}..={QP_MAX}, got {qp}"
        )));
    }
    Ok(())
}

/// Quantizer step for a quality parameter; doubles every 6 qp.
pub fn qp_step(qp: u8) -> f64 {
    2f64.powf((qp as f64 - 4.0) / 6.0)
}

/// Orthonormal DCT-II basis, `basis[u * 8 + x]`.
fn basis() -> &'static [f64; COEFFS] {
    static BASIS: OnceLock<[f64; COEFFS]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [0.0; COEFFS];
        for u in 0..BLOCK {
            let scale = if u == 0 {
                (1.0 / BLOCK as f64).sqrt()
            } else {
                (2.0 / BLOCK as f64).sqrt()
            };
            for x in 0..BLOCK {
                b[u * BLOCK + x] = scale * (((2 * x + 1) * u) as f64 * PI / (2 * BLOCK) as f64).cos();
            }
        }
        b
    })
}

/// Zigzag scan order: entry `k` is the raster index of the k-th coefficient.
fn zigzag() -> &'static [usize; COEFFS] {
    static ORDER: OnceLock<[usize; COEFFS]> = OnceLock::new();
    ORDER.get_or_init(|| {
        let mut order = [0; COEFFS];
        let mut k = 0;
        for s in 0..(2 * BLOCK - 1) {
            let range: Vec<usize> = (0..BLOCK).filter(|&i| s >= i && s - i < BLOCK).collect();
            let rows: Vec<usize> = if s % 2 == 0 {
                range.into_iter().rev().collect()
            } else {
                range
            };
            for i in rows {
                order[k] = i * BLOCK + (s - i);
                k += 1;
            }
        }
        order
    })
}

fn dct2(block: &[f64; COEFFS]) -> [f64; COEFFS] {
    let b = basis();
    let mut tmp = [0.0; COEFFS];
    for u in 0..BLOCK {
        for x in 0..BLOCK {
            tmp[u * BLOCK + x] = (0..BLOCK).map(|y| b[u * BLOCK + y] * block[y * BLOCK + x]).sum();
        }
    }
    let mut out = [0.0; COEFFS];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            out[u * BLOCK + v] = (0..BLOCK).map(|x| tmp[u * BLOCK + x] * b[v * BLOCK + x]).sum();
        }
    }
    out
}

fn idct2(coef: &[f64; COEFFS]) -> [f64; COEFFS] {
    let b = basis();
    let mut tmp = [0.0; COEFFS];
    for y in 0..BLOCK {
        for v in 0..BLOCK {
            tmp[y * BLOCK + v] = (0..BLOCK).map(|u| b[u * BLOCK + y] * coef[u * BLOCK + v]).sum();
        }
    }
    let mut out = [0.0; COEFFS];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            out[y * BLOCK + x] = (0..BLOCK).map(|v| tmp[y * BLOCK + v] * b[v * BLOCK + x]).sum();
        }
    }
    out
}

fn band(k: usize) -> usize {
    match k {
        0 => 0,
        1..=5 => 1,
        6..=14 => 2,
        15..=27 => 3,
        _ => 4,
    }
}

/// Adaptive models shared by the encoder and decoder.
struct Models {
    count: Vec<BitModel>,
    sig: Vec<BitModel>,
    prefix: Vec<BitModel>,
}

impl Models {
    fn new() -> Self {
        Models {
            count: vec![BitModel::default(); 128],
            sig: vec![BitModel::default(); BANDS * 2],
            prefix: vec![BitModel::default(); BANDS * MAX_PREFIX],
        }
    }
}

const COUNT_BITS: usize = 7;

fn encode_block(enc: &mut RangeEncoder, m: &mut Models, q: &[i32; COEFFS]) {
    let zz = zigzag();
    let count = (0..COEFFS).rev().find(|&k| q[zz[k]] != 0).map_or(0, |k| k + 1);
    let mut node = 1;
    for i in (0..COUNT_BITS).rev() {
        let bit = (count >> i) & 1 == 1;
        enc.encode(&mut m.count[node], bit);
        node = node * 2 + bit as usize;
    }
    let mut prev_zero = false;
    for k in 0..count {
        let v = q[zz[k]];
        let b = band(k);
        if k + 1 < count {
            enc.encode(&mut m.sig[b * 2 + prev_zero as usize], v != 0);
        }
        prev_zero = v == 0;
        if v == 0 {
            continue;
        }
        enc.encode_direct(v < 0);
        // Elias-gamma code of |v| with an adaptive unary length prefix.
        // Quantized 8-bit DCT coefficients stay far below 2^MAX_PREFIX.
        let mag = v.unsigned_abs() as u64;
        let len = 63 - mag.leading_zeros() as usize;
        for i in 0..len {
            enc.encode(&mut m.prefix[b * MAX_PREFIX + i], true);
        }
        enc.encode(&mut m.prefix[b * MAX_PREFIX + len], false);
        for i in (0..len).rev() {
            enc.encode_direct((mag >> i) & 1 == 1);
        }
    }
}

fn decode_block(dec: &mut RangeDecoder, m: &mut Models) -> Result<[i32; COEFFS]> {
    let zz = zigzag();
    let mut node = 1;
    for _ in 0..COUNT_BITS {
        node = node * 2 + dec.decode(&mut m.count[node]) as usize;
    }
    let count = node - (1 << COUNT_BITS);
    if count > COEFFS {
        return Err(Error::corrupt(0, format!("block claims {count} coefficients")));
    }
    let mut q = [0i32; COEFFS];
    let mut prev_zero = false;
    for k in 0..count {
        let b = band(k);
        let nonzero = k + 1 == count || dec.decode(&mut m.sig[b * 2 + prev_zero as usize]);
        prev_zero = !nonzero;
        if !nonzero {
            continue;
        }
        let negative = dec.decode_direct();
        let mut len = 0;
        while dec.decode(&mut m.prefix[b * MAX_PREFIX + len]) {
            len += 1;
            if len == MAX_PREFIX {
                return Err(Error::corrupt(0, "coefficient magnitude out of range"));
            }
        }
        let mut mag = 1i64;
        for _ in 0..len {
            mag = (mag << 1) | dec.decode_direct() as i64;
        }
        q[zz[k]] = if negative { -mag as i32 } else { mag as i32 };
    }
    Ok(q)
}

/// Maps the residual to 8-bit levels and codes it. `r` must be a single image.
pub fn encode_residual(r: &Tensor, qp: u8) -> Result<(ResidualHeader, Vec<u8>)> {
    check_qp(qp)?;
    if r.batch() != 1 {
        return Err(Error::shape(
            "encode_residual",
            format!("expected one image, got {}", r.batch()),
        ));
    }
    if !r.is_finite() {
        return Err(Error::InvalidArgument("residual contains non-finite values".into()));
    }
    let (lo, hi, _) = if r.is_empty() { (0.0, 0.0, 0.0) } else { r.stats() };
    let header = ResidualHeader {
        rmin: lo as f32,
        rmax: hi as f32,
        qp,
        block: BLOCK as u8,
    };
    if header.is_constant() {
        return Ok((header, Vec::new()));
    }
    let (rmin, span) = (header.rmin as f64, header.rmax as f64 - header.rmin as f64);
    let step = qp_step(qp);
    let (h, w) = (r.height(), r.width());
    let mut enc = RangeEncoder::new();
    let mut models = Models::new();
    for c in 0..r.channels() {
        let levels: Vec<f64> = r
            .plane(0, c)
            .iter()
            .map(|&v| ((v - rmin) / span * 255.0).clamp(0.0, 255.0).round())
            .collect();
        let mut prev_dc = 0;
        for by in (0..h).step_by(BLOCK) {
            for bx in (0..w).step_by(BLOCK) {
                let mut block = [0.0; COEFFS];
                for y in 0..BLOCK {
                    for x in 0..BLOCK {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        block[y * BLOCK + x] = levels[sy * w + sx] - 128.0;
                    }
                }
                let coef = dct2(&block);
                let mut q = [0i32; COEFFS];
                for (qi, ci) in q.iter_mut().zip(coef.iter()) {
                    *qi = (ci / step).round() as i32;
                }
                let dc = q[0];
                q[0] -= prev_dc;
                prev_dc = dc;
                encode_block(&mut enc, &mut models, &q);
            }
        }
    }
    Ok((header, enc.finish()))
}

/// Reconstructs a `(1, channels, height, width)` residual.
pub fn decode_residual(
    header: &ResidualHeader,
    payload: &[u8],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    header.validate()?;
    let shape = [1, channels, height, width];
    if header.is_constant() {
        if !payload.is_empty() {
            return Err(Error::corrupt(0, "payload present for a constant residual"));
        }
        return Ok(Tensor::filled(shape, header.rmin as f64));
    }
    let (rmin, span) = (header.rmin as f64, header.rmax as f64 - header.rmin as f64);
    let step = qp_step(header.qp);
    let mut out = Tensor::zeros(shape);
    let mut dec = RangeDecoder::new(payload);
    let mut models = Models::new();
    for c in 0..channels {
        let plane = out.plane_mut(0, c);
        let mut prev_dc = 0i64;
        for by in (0..height).step_by(BLOCK) {
            for bx in (0..width).step_by(BLOCK) {
                let q = decode_block(&mut dec, &mut models)?;
                let dc = prev_dc + q[0] as i64;
                prev_dc = dc;
                let mut coef = [0.0; COEFFS];
                for (ci, qi) in coef.iter_mut().zip(q.iter()) {
                    *ci = *qi as f64 * step;
                }
                coef[0] = dc as f64 * step;
                let pixels = idct2(&coef);
                for y in 0..BLOCK.min(height - by) {
                    for x in 0..BLOCK.min(width - bx) {
                        let level = (pixels[y * BLOCK + x] + 128.0).round().clamp(0.0, 255.0);
                        plane[(by + y) * width + bx + x] = rmin + level / 255.0 * span;
                    }
                }
            }
        }
    }
    dec.finish(0)?;
    Ok(out)
}
