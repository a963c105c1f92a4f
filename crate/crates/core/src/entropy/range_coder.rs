//! Binary adaptive range coder with carry propagation through a cached byte.
//!
//! The encoder emits exactly the bytes the decoder consumes: the decoder
//! primes four bytes and reads one more per renormalization, so a decoder
//! that ends with unread input or that ran past the end signals corruption.

use crate::error::{Error, Result};

const PROB_BITS: u32 = 16;
const PROB_ONE: u32 = 1 << PROB_BITS;
const PROB_MIN: u32 = 32;
const TOP: u32 = 1 << 24;
const ADAPT_LIMIT: u32 = 30;
const SLOW_RATE: u32 = 32;

/// Adaptive estimate of P(bit = 0). Adapts like a running frequency count for
/// the first few observations, then as an exponential average.
#[derive(Clone, Copy, Debug)]
pub struct BitModel {
    p0: u32,
    seen: u32,
}

impl Default for BitModel {
    fn default() -> Self {
        BitModel {
            p0: PROB_ONE / 2,
            seen: 0,
        }
    }
}

impl BitModel {
    fn update(&mut self, bit: bool) {
        let rate = if self.seen < ADAPT_LIMIT {
            self.seen += 1;
            self.seen + 1
        } else {
            SLOW_RATE
        };
        if bit {
            self.p0 -= self.p0 / rate;
        } else {
            self.p0 += (PROB_ONE - self.p0) / rate;
        }
        self.p0 = self.p0.clamp(PROB_MIN, PROB_ONE - PROB_MIN);
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            while self.pending > 0 {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, model: &mut BitModel, bit: bool) {
        let bound = (self.range >> PROB_BITS) * model.p0;
        if bit {
            self.low += bound as u64;
            self.range -= bound;
        } else {
            self.range = bound;
        }
        model.update(bit);
        self.normalize();
    }

    /// Codes a bit with fixed probability one half.
    pub fn encode_direct(&mut self, bit: bool) {
        self.range >>= 1;
        if bit {
            self.low += self.range as u64;
        }
        self.normalize();
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        // The first emitted byte is always zero and is not transmitted.
        self.out.remove(0);
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    overrun: bool,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
            overrun: false,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        match self.data.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                b
            }
            None => {
                self.overrun = true;
                0
            }
        }
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
    }

    pub fn decode(&mut self, model: &mut BitModel) -> bool {
        let bound = (self.range >> PROB_BITS) * model.p0;
        let bit = if self.code < bound {
            self.range = bound;
            false
        } else {
            self.code -= bound;
            self.range -= bound;
            true
        };
        model.update(bit);
        self.normalize();
        bit
    }

    pub fn decode_direct(&mut self) -> bool {
        self.range >>= 1;
        let bit = self.code >= self.range;
        if bit {
            self.code -= self.range;
        }
        self.normalize();
        bit
    }

    /// Checks that every byte was consumed and no read went past the end.
    /// `base` is added to reported offsets.
    pub fn finish(self, base: usize) -> Result<()> {
        if self.overrun {
            return Err(Error::Truncated {
                offset: base + self.data.len(),
            });
        }
        if self.pos != self.data.len() {
            return Err(Error::corrupt(base + self.pos, "unused bytes after range-coded data"));
        }
        Ok(())
    }
}
