//! Lossless coding of quantized code-map channels.
//!
//! Each symbol is predicted from its left neighbour (the pixel above for the
//! first column), the prediction residual is wrapped modulo `2^B` into a
//! signed value and zigzag-mapped to `[0, 2^B)`, and the mapped value is coded
//! most-significant bit first with adaptive binary contexts selected by the
//! previous residual's magnitude, the bit position, and whether all higher
//! bits were zero.
//!
//! Payload layout:
//!
//! | bytes | content |
//! |-------|---------|
//! | 1     | mode: 0 = range coded, 1 = raw bit-packed |
//! | mode 0: 1 | `nbits`, the bit length of the largest mapped residual |
//! | mode 0: rest | range-coded bits (absent when `nbits == 0`) |
//! | mode 1: rest | symbols packed `B` bits each, MSB first, zero padded |
//!
//! The raw mode is used whenever coding would not shrink the plane, so a
//! payload is never more than one byte longer than the packed symbols.

pub mod range_coder;

use crate::error::{Error, Result};

pub use range_coder::{BitModel, RangeDecoder, RangeEncoder};

const MODE_CODED: u8 = 0;
const MODE_RAW: u8 = 1;
const BUCKETS: usize = 3;

/// A `height x width` plane of `bits`-bit symbols in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolPlane {
    pub width: usize,
    pub height: usize,
    pub bits: u8,
    pub symbols: Vec<u8>,
}

impl SymbolPlane {
    pub fn new(width: usize, height: usize, bits: u8, symbols: Vec<u8>) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidArgument(format!(
                "symbol bit depth must be in 1..=8, got {bits}"
            )));
        }
        if symbols.len() != width * height {
            return Err(Error::shape(
                "SymbolPlane",
                format!("{} symbols for a {height}x{width} plane", symbols.len()),
            ));
        }
        let top = ((1u32 << bits) - 1) as u8;
        if let Some(i) = symbols.iter().position(|&s| s > top) {
            return Err(Error::InvalidArgument(format!(
                "symbol {} at index {i} does not fit in {bits} bits",
                symbols[i]
            )));
        }
        Ok(SymbolPlane {
            width,
            height,
            bits,
            symbols,
        })
    }

    /// Size of the plane packed at `bits` bits per symbol.
    pub fn raw_len(&self) -> usize {
        raw_len(self.symbols.len(), self.bits)
    }
}

fn raw_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

fn predict(symbols: &[u8], width: usize, i: usize) -> u8 {
    if i % width != 0 {
        symbols[i - 1]
    } else if i >= width {
        symbols[i - width]
    } else {
        0
    }
}

fn to_residual(symbol: u8, pred: u8, bits: u8) -> u32 {
    let modulus = 1i32 << bits;
    let mut d = (symbol as i32 - pred as i32).rem_euclid(modulus);
    if d >= modulus / 2 {
        d -= modulus;
    }
    if d >= 0 {
        2 * d as u32
    } else {
        (-2 * d - 1) as u32
    }
}

fn from_residual(v: u32, pred: u8, bits: u8) -> u8 {
    let d = if v % 2 == 0 {
        (v / 2) as i32
    } else {
        -((v as i32 + 1) / 2)
    };
    (pred as i32 + d).rem_euclid(1 << bits) as u8
}

fn bucket(prev: u32) -> usize {
    match prev {
        0 => 0,
        1..=2 => 1,
        _ => 2,
    }
}

struct Contexts {
    models: Vec<BitModel>,
    nbits: usize,
}

impl Contexts {
    fn new(nbits: usize) -> Self {
        Contexts {
            models: vec![BitModel::default(); BUCKETS * nbits * 2],
            nbits,
        }
    }

    fn get(&mut self, bucket: usize, pos: usize, prefix_zero: bool) -> &mut BitModel {
        &mut self.models[(bucket * self.nbits + pos) * 2 + prefix_zero as usize]
    }
}

/// Codes a plane into a self-delimiting payload (given the plane dimensions).
pub fn encode_plane(plane: &SymbolPlane) -> Vec<u8> {
    let bits = plane.bits;
    let residuals: Vec<u32> = (0..plane.symbols.len())
        .map(|i| to_residual(plane.symbols[i], predict(&plane.symbols, plane.width, i), bits))
        .collect();
    let nbits = residuals.iter().map(|v| 32 - v.leading_zeros()).max().unwrap_or(0) as usize;

    let mut out = vec![MODE_CODED, nbits as u8];
    if nbits > 0 {
        let mut enc = RangeEncoder::new();
        let mut ctx = Contexts::new(nbits);
        let mut prev = 0;
        for &v in &residuals {
            let b = bucket(prev);
            let mut prefix_zero = true;
            for pos in (0..nbits).rev() {
                let bit = (v >> pos) & 1 == 1;
                enc.encode(ctx.get(b, pos, prefix_zero), bit);
                prefix_zero &= !bit;
            }
            prev = v;
        }
        out.extend(enc.finish());
    }
    if out.len() > 1 + plane.raw_len() {
        out = pack_raw(plane);
    }
    out
}

fn pack_raw(plane: &SymbolPlane) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + plane.raw_len());
    out.push(MODE_RAW);
    let (mut acc, mut filled) = (0u32, 0u32);
    for &s in &plane.symbols {
        acc = (acc << plane.bits) | s as u32;
        filled += plane.bits as u32;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
            acc &= (1 << filled) - 1;
        }
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    out
}

fn unpack_raw(data: &[u8], count: usize, bits: u8) -> Result<Vec<u8>> {
    let need = raw_len(count, bits);
    if data.len() < need {
        return Err(Error::Truncated { offset: 1 + data.len() });
    }
    if data.len() > need {
        return Err(Error::corrupt(1 + need, "unused bytes after packed symbols"));
    }
    let mut symbols = Vec::with_capacity(count);
    let (mut acc, mut filled, mut bytes) = (0u32, 0u32, data.iter());
    for _ in 0..count {
        while filled < bits as u32 {
            acc = (acc << 8) | *bytes.next().expect("length checked") as u32;
            filled += 8;
        }
        filled -= bits as u32;
        symbols.push((acc >> filled) as u8);
        acc &= (1 << filled) - 1;
    }
    if acc != 0 {
        return Err(Error::corrupt(need, "non-zero padding bits"));
    }
    Ok(symbols)
}

/// Inverts `encode_plane`. Errors carry byte offsets relative to the payload.
pub fn decode_plane(payload: &[u8], width: usize, height: usize, bits: u8) -> Result<SymbolPlane> {
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "symbol bit depth must be in 1..=8, got {bits}"
        )));
    }
    let count = width
        .checked_mul(height)
        .ok_or_else(|| Error::InvalidArgument("plane dimensions overflow".into()))?;
    let (&mode, rest) = payload.split_first().ok_or(Error::Truncated { offset: 0 })?;
    let symbols = match mode {
        MODE_RAW => unpack_raw(rest, count, bits)?,
        MODE_CODED => {
            let (&nbits, data) = rest.split_first().ok_or(Error::Truncated { offset: 1 })?;
            let nbits = nbits as usize;
            if nbits > bits as usize {
                return Err(Error::corrupt(1, format!("residual width {nbits} exceeds {bits} bits")));
            }
            if nbits == 0 {
                if !data.is_empty() {
                    return Err(Error::corrupt(2, "unused bytes after empty residuals"));
                }
                decode_residuals(&vec![0; count], width, bits)
            } else {
                let mut dec = RangeDecoder::new(data);
                let mut ctx = Contexts::new(nbits);
                let mut residuals = Vec::with_capacity(count);
                let mut prev = 0;
                for _ in 0..count {
                    let b = bucket(prev);
                    let mut prefix_zero = true;
                    let mut v = 0u32;
                    for pos in (0..nbits).rev() {
                        let bit = dec.decode(ctx.get(b, pos, prefix_zero));
                        v = (v << 1) | bit as u32;
                        prefix_zero &= !bit;
                    }
                    residuals.push(v);
                    prev = v;
                }
                dec.finish(2)?;
                if residuals.iter().any(|&v| v >= 1 << bits) {
                    return Err(Error::corrupt(2, "residual out of range"));
                }
                decode_residuals(&residuals, width, bits)
            }
        }
        other => return Err(Error::corrupt(0, format!("unknown plane mode {other}"))),
    };
    SymbolPlane::new(width, height, bits, symbols)
}

fn decode_residuals(residuals: &[u32], width: usize, bits: u8) -> Vec<u8> {
    let mut symbols = Vec::with_capacity(residuals.len());
    for (i, &v) in residuals.iter().enumerate() {
        let pred = predict(&symbols, width, i);
        symbols.push(from_residual(v, pred, bits));
    }
    symbols
}

/// Appends `[len u32 LE][payload][crc32 LE]`.
pub fn write_frame(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
}

/// Reads one frame starting at `*pos`, advancing past it.
pub fn read_frame<'a>(data: &'a [u8], pos: &mut usize, section: &str) -> Result<&'a [u8]> {
    let start = *pos;
    let len_bytes = data
        .get(start..start + 4)
        .ok_or(Error::Truncated { offset: data.len() })?;
    let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let body = start + 4;
    let end = body
        .checked_add(len)
        .filter(|&e| e + 4 <= data.len())
        .ok_or(Error::Truncated { offset: data.len() })?;
    let payload = &data[body..end];
    let stored = u32::from_le_bytes(data[end..end + 4].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::Checksum {
            section: section.to_string(),
            offset: end,
        });
    }
    *pos = end + 4;
    Ok(payload)
}
