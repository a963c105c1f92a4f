//! End-to-end image coding: pad, encode, quantize, entropy-code, and the
//! optional enhancement layer; and the inverse.
//!
//! Images are `(1, 3, H, W)` tensors of pixel values in `[0, 255]`. The
//! networks see them mapped to `[-1, 1]`.

use crate::bitstream::{self, RateReport, StreamHeader, PAD_MULTIPLE};
use crate::entropy::{decode_plane, encode_plane, SymbolPlane};
use crate::error::{Error, Result};
use crate::metrics::{max_scales, ms_ssim, psnr, MsSsimConfig};
use crate::network::{CodecModel, IMAGE_CHANNELS};
use crate::quantizer::{dequantize, quantize_tensor, QuantizedChannel, Rounding};
use crate::residual::{decode_residual, encode_residual};
use crate::tensor::Tensor;

pub const PEAK: f64 = 255.0;

/// Pixel values to the network's `[-1, 1]` range.
pub fn to_network(pixels: &Tensor) -> Tensor {
    pixels.map(|v| v / 127.5 - 1.0)
}

/// Network output back to pixel values.
pub fn to_pixels(net: &Tensor) -> Tensor {
    net.map(|v| (v + 1.0) * 127.5)
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Extends every plane by `pad_h` rows and `pad_w` columns, mirroring the
/// bottom and right edges.
pub fn reflect_pad(t: &Tensor, pad_h: usize, pad_w: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    let (ph, pw) = (h + pad_h, w + pad_w);
    let mut out = Tensor::zeros([n, c, ph, pw]);
    for i in 0..n {
        for ch in 0..c {
            let src = t.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..ph {
                let sy = reflect(y, h);
                for x in 0..pw {
                    dst[y * pw + x] = src[sy * w + reflect(x, w)];
                }
            }
        }
    }
    out
}

/// Top-left `h x w` window of every plane.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, th, tw] = t.shape();
    assert!(h <= th && w <= tw, "crop larger than tensor");
    let mut out = Tensor::zeros([n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let src = t.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[y * tw..y * tw + w]);
            }
        }
    }
    out
}

/// Padding that rounds `extent` up to a multiple of 8.
pub fn padding_for(extent: usize) -> usize {
    (PAD_MULTIPLE - extent % PAD_MULTIPLE) % PAD_MULTIPLE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    pub bits: u8,
    /// Quality parameter of the enhancement layer; `None` omits it.
    pub enhancement_qp: Option<u8>,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub report: RateReport,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// Base-layer reconstruction `x'`, unrounded, in `[0, 255]`.
    pub base: Tensor,
    /// `clamp(x' + r')` when an enhancement layer is present, else `x'`.
    pub image: Tensor,
    pub report: RateReport,
}

fn check_image(image: &Tensor) -> Result<()> {
    if image.batch() != 1 || image.channels() != IMAGE_CHANNELS || image.is_empty() {
        return Err(Error::shape(
            "encode_image",
            format!("expected one RGB image, got {:?}", image.shape()),
        ));
    }
    if image.data().iter().any(|v| !(0.0..=PEAK).contains(v)) {
        return Err(Error::InvalidArgument("pixel values must lie in [0, 255]".into()));
    }
    Ok(())
}

/// Base-layer reconstruction from dequantized code channels, cropped to `h x w`.
fn reconstruct(
    model: &CodecModel,
    channels: &[QuantizedChannel],
    ph: usize,
    pw: usize,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let alpha = model.config.alpha;
    let (ch, cw) = (ph / alpha, pw / alpha);
    let mut code = Tensor::zeros([1, channels.len(), ch, cw]);
    for (i, q) in channels.iter().enumerate() {
        code.plane_mut(0, i).copy_from_slice(&dequantize(q));
    }
    let net = model.decoder.forward(&code)?;
    Ok(crop(&to_pixels(&net), h, w).map(|v| v.clamp(0.0, PEAK)))
}

/// Encodes an image deterministically (nearest rounding).
pub fn encode_image(model: &CodecModel, image: &Tensor, opts: &EncodeOptions) -> Result<Encoded> {
    check_image(image)?;
    let (h, w) = (image.height(), image.width());
    let (pad_h, pad_w) = (padding_for(h), padding_for(w));
    let padded = reflect_pad(image, pad_h, pad_w);
    let code = model.encoder.forward(&to_network(&padded))?;
    let quantized = quantize_tensor(&code, opts.bits, Rounding::Nearest)?;
    let (ch, cw) = (code.height(), code.width());
    let payloads = quantized
        .planes
        .iter()
        .map(|q| SymbolPlane::new(cw, ch, opts.bits, q.values.clone()).map(|p| encode_plane(&p)))
        .collect::<Result<Vec<_>>>()?;

    let (enhancement, enhancement_payload) = match opts.enhancement_qp {
        Some(qp) => {
            let base = reconstruct(model, &quantized.planes, h + pad_h, w + pad_w, h, w)?;
            let residual = image.zip_map(&base, "residual", |a, b| a - b)?;
            let (rh, bytes) = encode_residual(&residual, qp)?;
            (Some(rh), Some(bytes))
        }
        None => (None, None),
    };
    let header = StreamHeader {
        height: h as u32,
        width: w as u32,
        pad_h: pad_h as u8,
        pad_w: pad_w as u8,
        bits: opts.bits,
        config_hash: model.config.hash(),
        channels: quantized.planes.iter().map(|q| q.spec).collect(),
        enhancement,
    };
    let bytes = bitstream::write_stream(&header, &payloads, enhancement_payload.as_deref())?;
    let report = bitstream::rate_report(&bitstream::read_stream(&bytes)?, bytes.len());
    Ok(Encoded { bytes, report })
}

/// Decodes a stream produced by `encode_image` with the same architecture.
pub fn decode_image(model: &CodecModel, bytes: &[u8]) -> Result<Decoded> {
    let stream = bitstream::read_stream_checked(bytes, model.config.hash())?;
    let header = &stream.header;
    if header.channels.len() != model.config.code_channels {
        return Err(Error::corrupt(
            0,
            format!(
                "{} code channels in stream, model has {}",
                header.channels.len(),
                model.config.code_channels
            ),
        ));
    }
    let (h, w) = (header.height as usize, header.width as usize);
    let (ph, pw) = (header.padded_height(), header.padded_width());
    let alpha = model.config.alpha;
    let channels = stream
        .channel_payloads
        .iter()
        .zip(&header.channels)
        .map(|(payload, spec)| {
            let plane = decode_plane(payload, pw / alpha, ph / alpha, header.bits)?;
            Ok(QuantizedChannel {
                values: plane.symbols,
                spec: *spec,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let base = reconstruct(model, &channels, ph, pw, h, w)?;
    let image = match (&header.enhancement, stream.enhancement_payload) {
        (Some(rh), Some(payload)) => {
            let residual = decode_residual(rh, payload, IMAGE_CHANNELS, h, w)?;
            base.zip_map(&residual, "enhance", |a, b| (a + b).clamp(0.0, PEAK))?
        }
        _ => base.clone(),
    };
    let report = bitstream::rate_report(&stream, bytes.len());
    Ok(Decoded { base, image, report })
}

/// Rate and quality of one encode/decode round trip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub bits: u8,
    pub qp: Option<u8>,
    pub bpp: f64,
    pub base_fraction: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
}

/// Encodes and decodes `image`, scoring the 8-bit output against it. MS-SSIM
/// uses as many scales (up to five) as the image supports.
pub fn evaluate(model: &CodecModel, image: &Tensor, opts: &EncodeOptions) -> Result<Evaluation> {
    let encoded = encode_image(model, image, opts)?;
    let decoded = decode_image(model, &encoded.bytes)?;
    let output = decoded.image.map(f64::round);
    let scales = max_scales(image.height(), image.width(), 11);
    if scales == 0 {
        return Err(Error::TooSmallForMsSsim {
            height: image.height(),
            width: image.width(),
            scales: 1,
            window: 11,
            max_scales: 0,
        });
    }
    Ok(Evaluation {
        bits: opts.bits,
        qp: opts.enhancement_qp,
        bpp: encoded.report.bpp,
        base_fraction: encoded.report.base_fraction(),
        psnr_db: psnr(image, &output, PEAK)?,
        ms_ssim: ms_ssim(image, &output, &MsSsimConfig::new(scales, PEAK)?)?,
    })
}
