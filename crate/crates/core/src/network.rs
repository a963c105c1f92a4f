//! The five-stage deep encoder and decoder.
//!
//! Encoder stage schedule (input `U`, output feeds the next stage):
//!
//! | stage | layers                                  |
//! |-------|-----------------------------------------|
//! | 0     | affine conv 3 -> n, GDN                 |
//! | 1..=3 | down conv n -> n, GDN, residual block   |
//! | 4     | affine conv n -> alpha_c, GDN           |
//!
//! The decoder mirrors it: each stage starts with IGDN followed by a
//! convolution (transposed for stages 1..=3, which are also followed by a
//! residual block), and the final output is clamped to `[-1, 1]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gdn::{
    gdn_backward, gdn_forward, igdn_backward, igdn_forward, res_block_backward, res_block_forward_taped, BlockVariant,
    GdnParams, ResBlockParams, ResBlockTape,
};
use crate::tensor::{conv_backward, conv_forward, ops, ConvKernel, ConvMode, Tensor};

/// Number of stride-2 stages; the spatial downsampling factor is `2^DOWN_STAGES`.
pub const DOWN_STAGES: usize = 3;
/// Input and output image channels.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// GDN-based residual blocks (ResGDN in the encoder, ResIGDN in the decoder).
    ResGdn,
    /// Conventional residual blocks with ReLU.
    ResRelu,
    /// No residual blocks.
    NoRes,
}

/// Architecture hyper-parameters. Serialized as `key = value` text; the
/// SHA-256 of that text binds checkpoints and bitstreams to an architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Spatial downsampling factor between image and code map.
    pub alpha: usize,
    /// Channels in the code map.
    pub code_channels: usize,
    pub hidden_width: usize,
    pub affine_kernel: usize,
    pub resample_kernel: usize,
    pub block_kind: BlockKind,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            alpha: 1 << DOWN_STAGES,
            code_channels: 8,
            hidden_width: 64,
            affine_kernel: 3,
            resample_kernel: 4,
            block_kind: BlockKind::ResGdn,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha != 1 << DOWN_STAGES {
            return Err(Error::Config(format!(
                "alpha must be {} ({} downsampling stages), got {}",
                1 << DOWN_STAGES,
                DOWN_STAGES,
                self.alpha
            )));
        }
        if self.code_channels == 0 || self.code_channels > 255 || self.hidden_width == 0 {
            return Err(Error::Config("channel counts must be in 1..=255".into()));
        }
        if self.affine_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "affine_kernel must be odd, got {}",
                self.affine_kernel
            )));
        }
        if self.resample_kernel == 0 {
            return Err(Error::Config("resample_kernel must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let config: CodecConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Number of convolutions in the encoder.
    pub fn encoder_conv_count(&self) -> usize {
        let blocks = if self.block_kind == BlockKind::NoRes {
            0
        } else {
            DOWN_STAGES
        };
        2 + DOWN_STAGES + 2 * blocks
    }
}

/// One encoder stage: convolution, GDN, optional residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    pub conv: ConvKernel,
    pub gdn: GdnParams,
    pub block: Option<ResBlockParams>,
}

/// One decoder stage: IGDN, convolution, optional residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    pub igdn: GdnParams,
    pub conv: ConvKernel,
    pub block: Option<ResBlockParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub stages: Vec<EncoderStage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub stages: Vec<DecoderStage>,
}

const RESIDUAL_GAIN: f64 = 0.1;

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv(&mut self, out_ch: usize, in_ch: usize, k: usize, mode: ConvMode) -> ConvKernel {
        self.scaled_conv(out_ch, in_ch, k, mode, 1.0)
    }

    /// Fan-in scaled normal weights times `gain`, zero bias.
    fn scaled_conv(&mut self, out_ch: usize, in_ch: usize, k: usize, mode: ConvMode, gain: f64) -> ConvKernel {
        let mut kernel = ConvKernel::zeros(out_ch, in_ch, k, mode).expect("valid kernel geometry");
        let taps = match mode {
            ConvMode::Up => (k * k / 4).max(1),
            _ => k * k,
        };
        let std = gain * (1.0 / (in_ch * taps) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in kernel.weight.data_mut() {
            *w = normal.sample(&mut self.rng);
        }
        kernel
    }

    fn block(&mut self, variant: BlockVariant, width: usize, k: usize) -> ResBlockParams {
        // A small residual branch keeps each block close to the identity at
        // initialization, so activations do not grow with depth.
        let convs = [
            self.conv(width, width, k, ConvMode::Affine),
            self.scaled_conv(width, width, k, ConvMode::Affine, RESIDUAL_GAIN),
        ];
        let norms = match variant {
            BlockVariant::ResRelu => [None, None],
            _ => [Some(GdnParams::new(width)), Some(GdnParams::new(width))],
        };
        ResBlockParams::new(variant, convs, norms).expect("consistent block")
    }
}

fn visit_block<'a>(block: &'a Option<ResBlockParams>, out: &mut Vec<&'a Tensor>) {
    if let Some(b) = block {
        for conv in &b.convs {
            out.push(&conv.weight);
            out.push(&conv.bias);
        }
        for p in b.norms.iter().flatten() {
            out.push(&p.beta);
            out.push(&p.gamma);
        }
    }
}

fn visit_block_mut<'a>(block: &'a mut Option<ResBlockParams>, out: &mut Vec<&'a mut Tensor>) {
    if let Some(b) = block {
        for conv in &mut b.convs {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        for p in b.norms.iter_mut().flatten() {
            out.push(&mut p.beta);
            out.push(&mut p.gamma);
        }
    }
}

/// Saved activations of one stage.
#[derive(Clone, Debug)]
struct StageTape {
    first_in: Tensor,
    second_in: Tensor,
    block: Option<ResBlockTape>,
}

/// Saved activations of a full encoder forward pass.
#[derive(Clone, Debug)]
pub struct EncoderTape {
    stages: Vec<StageTape>,
}

/// Saved activations of a full decoder forward pass.
#[derive(Clone, Debug)]
pub struct DecoderTape {
    stages: Vec<StageTape>,
    unclamped: Tensor,
}

impl EncoderParams {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_taped(x)?.0)
    }

    pub fn forward_taped(&self, x: &Tensor) -> Result<(Tensor, EncoderTape)> {
        let [_, c, h, w] = x.shape();
        let alpha = 1 << DOWN_STAGES;
        if c != IMAGE_CHANNELS {
            return Err(Error::shape(
                "encode_features",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        if h % alpha != 0 || w % alpha != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "encode_features",
                format!("extents {h}x{w} must be positive multiples of {alpha}; pad the image first"),
            ));
        }
        let mut tapes = Vec::with_capacity(self.stages.len());
        let mut u = x.clone();
        for stage in &self.stages {
            let v = conv_forward(&u, &stage.conv)?;
            let w = gdn_forward(&v, &stage.gdn)?;
            let (next, block) = match &stage.block {
                Some(b) => {
                    let (y, t) = res_block_forward_taped(&w, b)?;
                    (y, Some(t))
                }
                None => (w, None),
            };
            tapes.push(StageTape {
                first_in: u,
                second_in: v,
                block,
            });
            u = next;
        }
        Ok((u, EncoderTape { stages: tapes }))
    }

    /// Back-propagates `grad` (w.r.t. the code map), accumulating parameter
    /// gradients, and returns the gradient w.r.t. the input image.
    pub fn backward(&mut self, grad: &Tensor, tape: &EncoderTape) -> Result<Tensor> {
        let mut g = grad.clone();
        for (stage, t) in self.stages.iter_mut().zip(&tape.stages).rev() {
            if let (Some(b), Some(bt)) = (stage.block.as_mut(), t.block.as_ref()) {
                let (gi, grads) = res_block_backward(&g, bt, b)?;
                b.accumulate(&grads)?;
                g = gi;
            }
            let gg = gdn_backward(&g, &t.second_in, &stage.gdn)?;
            stage.gdn.accumulate(&gg)?;
            let cg = conv_backward(&gg.input, &t.first_in, &stage.conv)?;
            stage.conv.weight.accumulate_grad(cg.weight.data())?;
            stage.conv.bias.accumulate_grad(cg.bias.data())?;
            g = cg.input;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend([&s.conv.weight, &s.conv.bias, &s.gdn.beta, &s.gdn.gamma]);
            visit_block(&s.block, &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.conv.weight);
            out.push(&mut s.conv.bias);
            out.push(&mut s.gdn.beta);
            out.push(&mut s.gdn.gamma);
            visit_block_mut(&mut s.block, &mut out);
        }
        out
    }

    pub fn gdn_params_mut(&mut self) -> Vec<&mut GdnParams> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.gdn);
            if let Some(b) = s.block.as_mut() {
                out.extend(b.norms.iter_mut().flatten());
            }
        }
        out
    }

    pub fn conv_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| 1 + if s.block.is_some() { 2 } else { 0 })
            .sum()
    }
}

impl DecoderParams {
    pub fn forward(&self, code: &Tensor) -> Result<Tensor> {
        Ok(self.forward_taped(code)?.0)
    }

    pub fn forward_taped(&self, code: &Tensor) -> Result<(Tensor, DecoderTape)> {
        let expected = self.stages[0].igdn.channels();
        if code.channels() != expected {
            return Err(Error::shape(
                "decode_features",
                format!(
                    "code map has {} channels, decoder expects {}",
                    code.channels(),
                    expected
                ),
            ));
        }
        let mut tapes = Vec::with_capacity(self.stages.len());
        let mut w = code.clone();
        for stage in &self.stages {
            let v = igdn_forward(&w, &stage.igdn)?;
            let u = conv_forward(&v, &stage.conv)?;
            let (next, block) = match &stage.block {
                Some(b) => {
                    let (y, t) = res_block_forward_taped(&u, b)?;
                    (y, Some(t))
                }
                None => (u, None),
            };
            tapes.push(StageTape {
                first_in: w,
                second_in: v,
                block,
            });
            w = next;
        }
        let out = ops::clamp(&w, -1.0, 1.0);
        Ok((
            out,
            DecoderTape {
                stages: tapes,
                unclamped: w,
            },
        ))
    }

    /// Back-propagates `grad` (w.r.t. the reconstruction), accumulating
    /// parameter gradients, and returns the gradient w.r.t. the code map.
    pub fn backward(&mut self, grad: &Tensor, tape: &DecoderTape) -> Result<Tensor> {
        let mut g = ops::clamp_backward(grad, &tape.unclamped, -1.0, 1.0)?;
        for (stage, t) in self.stages.iter_mut().zip(&tape.stages).rev() {
            if let (Some(b), Some(bt)) = (stage.block.as_mut(), t.block.as_ref()) {
                let (gi, grads) = res_block_backward(&g, bt, b)?;
                b.accumulate(&grads)?;
                g = gi;
            }
            let cg = conv_backward(&g, &t.second_in, &stage.conv)?;
            stage.conv.weight.accumulate_grad(cg.weight.data())?;
            stage.conv.bias.accumulate_grad(cg.bias.data())?;
            let ig = igdn_backward(&cg.input, &t.first_in, &stage.igdn)?;
            stage.igdn.accumulate(&ig)?;
            g = ig.input;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend([&s.igdn.beta, &s.igdn.gamma, &s.conv.weight, &s.conv.bias]);
            visit_block(&s.block, &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.igdn.beta);
            out.push(&mut s.igdn.gamma);
            out.push(&mut s.conv.weight);
            out.push(&mut s.conv.bias);
            visit_block_mut(&mut s.block, &mut out);
        }
        out
    }

    pub fn gdn_params_mut(&mut self) -> Vec<&mut GdnParams> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.igdn);
            if let Some(b) = s.block.as_mut() {
                out.extend(b.norms.iter_mut().flatten());
            }
        }
        out
    }
}

/// `c = f_E(x)`.
pub fn encode_features(x: &Tensor, encoder: &EncoderParams) -> Result<Tensor> {
    encoder.forward(x)
}

/// `x' = f_D(c_hat)`, clamped to `[-1, 1]`.
pub fn decode_features(code: &Tensor, decoder: &DecoderParams) -> Result<Tensor> {
    decoder.forward(code)
}

/// Encoder and decoder together with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl CodecModel {
    /// Randomly initialised model; identical `seed` gives identical weights.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let n = config.hidden_width;
        let ka = config.affine_kernel;
        let kr = config.resample_kernel;
        let (enc_block, dec_block) = match config.block_kind {
            BlockKind::ResGdn => (Some(BlockVariant::ResGdn), Some(BlockVariant::ResIgdn)),
            BlockKind::ResRelu => (Some(BlockVariant::ResRelu), Some(BlockVariant::ResRelu)),
            BlockKind::NoRes => (None, None),
        };

        let mut enc = Vec::new();
        enc.push(EncoderStage {
            conv: init.conv(n, IMAGE_CHANNELS, ka, ConvMode::Affine),
            gdn: GdnParams::new(n),
            block: None,
        });
        for _ in 0..DOWN_STAGES {
            enc.push(EncoderStage {
                conv: init.conv(n, n, kr, ConvMode::Down),
                gdn: GdnParams::new(n),
                block: enc_block.map(|v| init.block(v, n, ka)),
            });
        }
        enc.push(EncoderStage {
            conv: init.conv(config.code_channels, n, ka, ConvMode::Affine),
            gdn: GdnParams::new(config.code_channels),
            block: None,
        });

        let mut dec = Vec::new();
        dec.push(DecoderStage {
            igdn: GdnParams::new(config.code_channels),
            conv: init.conv(n, config.code_channels, ka, ConvMode::Affine),
            block: None,
        });
        for _ in 0..DOWN_STAGES {
            dec.push(DecoderStage {
                igdn: GdnParams::new(n),
                conv: init.conv(n, n, kr, ConvMode::Up),
                block: dec_block.map(|v| init.block(v, n, ka)),
            });
        }
        dec.push(DecoderStage {
            igdn: GdnParams::new(n),
            conv: init.scaled_conv(IMAGE_CHANNELS, n, ka, ConvMode::Affine, RESIDUAL_GAIN),
            block: None,
        });

        Ok(CodecModel {
            config,
            encoder: EncoderParams { stages: enc },
            decoder: DecoderParams { stages: dec },
        })
    }

    /// Encoder parameters followed by decoder parameters, in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Restores the GDN feasibility constraints after an update.
    pub fn project(&mut self) {
        for p in self.encoder.gdn_params_mut() {
            p.project();
        }
        for p in self.decoder.gdn_params_mut() {
            p.project();
        }
    }

    pub fn constraints_hold(&self) -> bool {
        let enc = self
            .encoder
            .stages
            .iter()
            .flat_map(|s| std::iter::once(&s.gdn).chain(s.block.iter().flat_map(|b| b.norms.iter().flatten())));
        let dec = self
            .decoder
            .stages
            .iter()
            .flat_map(|s| std::iter::once(&s.igdn).chain(s.block.iter().flat_map(|b| b.norms.iter().flatten())));
        enc.chain(dec).all(|p| p.validate().is_ok())
    }
}
