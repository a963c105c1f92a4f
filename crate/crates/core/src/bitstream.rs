//! The `.vgc` container: a checksummed header followed by one framed payload
//! per code-map channel and an optional framed enhancement payload.
//!
//! All integers are little-endian.
//!
//! | field | bytes |
//! |-------|-------|
//! | magic `VGC1` | 4 |
//! | version | 1 |
//! | height, width (original) | 4 + 4 |
//! | pad_h, pad_w | 1 + 1 |
//! | bit depth B | 1 |
//! | code channels | 1 |
//! | config hash | 8 |
//! | per channel: B, cmin f32, cmax f32, zero-point | 10 each |
//! | enhancement flag | 1 |
//! | if flag: rmin f32, rmax f32, qp, block size | 10 |
//! | CRC-32 of all preceding header bytes | 4 |
//! | per channel: length u32, payload, CRC-32 | 8 + len |
//! | if flag: length u32, payload, CRC-32 | 8 + len |
//!
//! The stream must end exactly after the last frame.

use crate::entropy::{read_frame, write_frame};
use crate::error::{Error, Result};
use crate::quantizer::QuantSpec;
use crate::residual::{ResidualHeader, HEADER_LEN as RESIDUAL_HEADER_LEN};

pub const MAGIC: [u8; 4] = *b"VGC1";
pub const VERSION: u8 = 1;
/// Image extents are padded up to a multiple of this.
pub const PAD_MULTIPLE: usize = 8;
pub const FRAME_OVERHEAD: usize = 8;

const FIXED_LEN: usize = 4 + 1 + 4 + 4 + 1 + 1 + 1 + 1 + 8;
const CHANNEL_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct StreamHeader {
    pub height: u32,
    pub width: u32,
    pub pad_h: u8,
    pub pad_w: u8,
    pub bits: u8,
    pub config_hash: u64,
    pub channels: Vec<QuantSpec>,
    pub enhancement: Option<ResidualHeader>,
}

impl StreamHeader {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("image extents must be positive".into()));
        }
        let pad_ok = |extent: u32, pad: u8| {
            (pad as usize) < PAD_MULTIPLE && (extent as usize + pad as usize) % PAD_MULTIPLE == 0
        };
        if !pad_ok(self.height, self.pad_h) || !pad_ok(self.width, self.pad_w) {
            return Err(Error::InvalidArgument(format!(
                "padding ({}, {}) does not round {}x{} up to a multiple of {PAD_MULTIPLE}",
                self.pad_h, self.pad_w, self.height, self.width
            )));
        }
        if !(1..=8).contains(&self.bits) {
            return Err(Error::InvalidArgument(format!("bit depth {} outside 1..=8", self.bits)));
        }
        if self.channels.is_empty() || self.channels.len() > 255 {
            return Err(Error::InvalidArgument(format!("{} code channels", self.channels.len())));
        }
        if let Some(s) = self.channels.iter().find(|s| s.bits != self.bits) {
            return Err(Error::InvalidArgument(format!(
                "channel bit depth {} differs from stream bit depth {}",
                s.bits, self.bits
            )));
        }
        if let Some(e) = &self.enhancement {
            e.validate()?;
        }
        Ok(())
    }

    pub fn padded_height(&self) -> usize {
        self.height as usize + self.pad_h as usize
    }

    pub fn padded_width(&self) -> usize {
        self.width as usize + self.pad_w as usize
    }

    /// Serialized header length including its checksum.
    pub fn encoded_len(&self) -> usize {
        FIXED_LEN + CHANNEL_LEN * self.channels.len() + 1 + self.enhancement.map_or(0, |_| RESIDUAL_HEADER_LEN) + 4
    }
}

/// A parsed stream; payloads borrow from the input bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream<'a> {
    pub header: StreamHeader,
    pub channel_payloads: Vec<&'a [u8]>,
    pub enhancement_payload: Option<&'a [u8]>,
}

/// Serializes a stream. `enhancement` must be present exactly when the header
/// carries a residual header.
pub fn write_stream(
    header: &StreamHeader,
    channel_payloads: &[Vec<u8>],
    enhancement: Option<&[u8]>,
) -> Result<Vec<u8>> {
    header.validate()?;
    if channel_payloads.len() != header.channels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} payloads for {} channels",
            channel_payloads.len(),
            header.channels.len()
        )));
    }
    if header.enhancement.is_some() != enhancement.is_some() {
        return Err(Error::InvalidArgument("enhancement flag and payload disagree".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&header.height.to_le_bytes());
    out.extend_from_slice(&header.width.to_le_bytes());
    out.push(header.pad_h);
    out.push(header.pad_w);
    out.push(header.bits);
    out.push(header.channels.len() as u8);
    out.extend_from_slice(&header.config_hash.to_le_bytes());
    for s in &header.channels {
        out.push(s.bits);
        out.extend_from_slice(&s.cmin.to_le_bytes());
        out.extend_from_slice(&s.cmax.to_le_bytes());
        out.push(s.zero_point);
    }
    match &header.enhancement {
        Some(e) => {
            out.push(1);
            out.extend_from_slice(&e.to_bytes());
        }
        None => out.push(0),
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    for p in channel_payloads {
        write_frame(&mut out, p);
    }
    if let Some(p) = enhancement {
        write_frame(&mut out, p);
    }
    Ok(out)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self.data.get(self.pos..end).ok_or(Error::Truncated {
            offset: self.data.len(),
        })?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses and verifies a stream without checking the config hash.
pub fn read_stream(data: &[u8]) -> Result<Stream<'_>> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version as u32));
    }
    let height = r.u32()?;
    let width = r.u32()?;
    let pad_h = r.u8()?;
    let pad_w = r.u8()?;
    let bits = r.u8()?;
    let count = r.u8()? as usize;
    let config_hash = r.u64()?;
    let mut raw_channels = Vec::with_capacity(count);
    for _ in 0..count {
        raw_channels.push((r.u8()?, r.f32()?, r.f32()?, r.u8()?));
    }
    let flag_at = r.pos;
    let enhancement = match r.u8()? {
        0 => None,
        1 => Some(r.take(RESIDUAL_HEADER_LEN)?.try_into().expect("header length")),
        other => return Err(Error::corrupt(flag_at, format!("enhancement flag {other}"))),
    };
    let header_end = r.pos;
    let stored = r.u32()?;
    if crc32fast::hash(&data[..header_end]) != stored {
        return Err(Error::Checksum {
            section: "header".into(),
            offset: header_end,
        });
    }

    let bad_header = |e: Error| Error::corrupt(header_end, format!("invalid header: {e}"));
    let channels = raw_channels
        .into_iter()
        .map(|(b, lo, hi, z)| QuantSpec::from_wire(b, lo, hi, z))
        .collect::<Result<Vec<_>>>()
        .map_err(bad_header)?;
    let enhancement = enhancement
        .map(|b: [u8; RESIDUAL_HEADER_LEN]| ResidualHeader::from_bytes(&b))
        .transpose()
        .map_err(bad_header)?;
    let header = StreamHeader {
        height,
        width,
        pad_h,
        pad_w,
        bits,
        config_hash,
        channels,
        enhancement,
    };
    header.validate().map_err(bad_header)?;

    let mut pos = r.pos;
    let mut channel_payloads = Vec::with_capacity(count);
    for i in 0..count {
        channel_payloads.push(read_frame(data, &mut pos, &format!("channel {i}"))?);
    }
    let enhancement_payload = match header.enhancement {
        Some(_) => Some(read_frame(data, &mut pos, "enhancement")?),
        None => None,
    };
    if pos != data.len() {
        return Err(Error::corrupt(pos, "trailing bytes after last frame"));
    }
    Ok(Stream {
        header,
        channel_payloads,
        enhancement_payload,
    })
}

/// Parses a stream and refuses it unless it was produced for `expected_hash`.
pub fn read_stream_checked(data: &[u8], expected_hash: u64) -> Result<Stream<'_>> {
    let stream = read_stream(data)?;
    if stream.header.config_hash != expected_hash {
        return Err(Error::ConfigMismatch {
            expected: expected_hash,
            found: stream.header.config_hash,
        });
    }
    Ok(stream)
}

/// Bits per pixel of a stream, split into base and enhancement shares.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateReport {
    pub total_bytes: usize,
    pub base_bytes: usize,
    pub enhancement_bytes: usize,
    pub bpp: f64,
    pub base_bpp: f64,
    pub enhancement_bpp: f64,
}

impl RateReport {
    /// Share of the total rate spent on the enhancement layer, in [0, 1].
    pub fn enhancement_fraction(&self) -> f64 {
        if self.total_bytes == 0 {
            0.0
        } else {
            self.enhancement_bytes as f64 / self.total_bytes as f64
        }
    }

    pub fn base_fraction(&self) -> f64 {
        1.0 - self.enhancement_fraction()
    }
}

/// `8 * bytes / (height * width)`.
pub fn bpp(bytes: usize, height: usize, width: usize) -> f64 {
    8.0 * bytes as f64 / (height * width) as f64
}

/// Rate report for a parsed stream of `total_bytes`. The enhancement share
/// counts its frame and its 10 header bytes; everything else is base.
pub fn rate_report(stream: &Stream, total_bytes: usize) -> RateReport {
    let (h, w) = (stream.header.height as usize, stream.header.width as usize);
    let enhancement_bytes = stream
        .enhancement_payload
        .map_or(0, |p| p.len() + FRAME_OVERHEAD + RESIDUAL_HEADER_LEN);
    let base_bytes = total_bytes - enhancement_bytes;
    let total = bpp(total_bytes, h, w);
    let base = bpp(base_bytes, h, w);
    RateReport {
        total_bytes,
        base_bytes,
        enhancement_bytes,
        bpp: total,
        base_bpp: base,
        enhancement_bpp: total - base,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(enhanced: bool) -> StreamHeader {
        StreamHeader {
            height: 8,
            width: 8,
            pad_h: 0,
            pad_w: 0,
            bits: 3,
            config_hash: 0x0123_4567_89ab_cdef,
            channels: vec![
                QuantSpec::from_wire(3, -1.5, 2.0, 3).unwrap(),
                QuantSpec::from_wire(3, 0.0, 0.0, 0).unwrap(),
            ],
            enhancement: enhanced.then_some(ResidualHeader {
                rmin: -20.0,
                rmax: 31.0,
                qp: 10,
                block: 8,
            }),
        }
    }

    #[test]
    fn minimal_stream_round_trips() {
        for enhanced in [false, true] {
            let h = header(enhanced);
            let payloads = vec![vec![1, 2, 3], vec![]];
            let enh = enhanced.then_some(&[9u8, 9][..]);
            let bytes = write_stream(&h, &payloads, enh).unwrap();
            assert_eq!(bytes, write_stream(&h, &payloads, enh).unwrap());
            let expected_len = h.encoded_len()
                + payloads.iter().map(|p| p.len() + FRAME_OVERHEAD).sum::<usize>()
                + enh.map_or(0, |p| p.len() + FRAME_OVERHEAD);
            assert_eq!(bytes.len(), expected_len);
            let s = read_stream(&bytes).unwrap();
            assert_eq!(s.header, h);
            assert_eq!(s.channel_payloads, vec![&[1u8, 2, 3][..], &[][..]]);
            assert_eq!(s.enhancement_payload, enh);
        }
    }

    #[test]
    fn specific_errors() {
        let h = header(false);
        let bytes = write_stream(&h, &[vec![5], vec![6]], None).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_stream(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(read_stream(&bad), Err(Error::UnsupportedVersion(2))));
        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(matches!(read_stream(&bad), Err(Error::Checksum { .. })));
        assert!(matches!(
            read_stream(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(read_stream(&longer), Err(Error::Corrupt { .. })));
        match read_stream_checked(&bytes, 7) {
            Err(e @ Error::ConfigMismatch { expected: 7, .. }) => {
                assert!(e.to_string().contains("0000000000000007"))
            }
            other => panic!("expected config mismatch, got {other:?}"),
        }
        assert!(read_stream_checked(&bytes, h.config_hash).is_ok());
    }

    #[test]
    fn write_rejects_inconsistent_inputs() {
        let h = header(false);
        assert!(write_stream(&h, &[vec![]], None).is_err());
        assert!(write_stream(&h, &[vec![], vec![]], Some(&[1])).is_err());
        let mut odd = header(false);
        odd.height = 7;
        assert!(write_stream(&odd, &[vec![], vec![]], None).is_err());
        odd.pad_h = 1;
        assert!(write_stream(&odd, &[vec![], vec![]], None).is_ok());
    }

    #[test]
    fn bpp_arithmetic() {
        assert_eq!(bpp(1000, 100, 100), 0.8);
        let h = StreamHeader {
            height: 100,
            width: 100,
            pad_h: 4,
            pad_w: 4,
            ..header(true)
        };
        let bytes = write_stream(&h, &[vec![0; 40], vec![0; 7]], Some(&[1; 100])).unwrap();
        let s = read_stream(&bytes).unwrap();
        let r = rate_report(&s, bytes.len());
        assert_eq!(r.base_bytes + r.enhancement_bytes, r.total_bytes);
        assert_eq!(r.enhancement_bytes, 118);
        assert_eq!(r.base_bpp + r.enhancement_bpp, r.bpp);
        let plain = write_stream(&header(false), &[vec![], vec![]], None).unwrap();
        let r = rate_report(&read_stream(&plain).unwrap(), plain.len());
        assert_eq!((r.enhancement_bytes, r.enhancement_fraction()), (0, 0.0));
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let h = header(true);
        let bytes = write_stream(&h, &[vec![1, 2, 3, 4], vec![7]], Some(&[5; 6])).unwrap();
        for i in 0..bytes.len() {
            for bit in 0..8 {
                let mut bad = bytes.clone();
                bad[i] ^= 1 << bit;
                assert!(read_stream(&bad).is_err(), "flip at byte {i} bit {bit} accepted");
            }
        }
    }
}
