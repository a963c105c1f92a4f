//! Multi-rate training: every step encodes a batch once, quantizes the code
//! map at each bit depth in the rate set with stochastic rounding, decodes
//! each, and back-propagates the summed objective through the straight-through
//! quantizer into the shared encoder.
//!
//! All randomness is derived from the seed and the (epoch, step) counters, so
//! a checkpoint only needs those counters to resume bit-exactly.

pub mod adam;
pub mod checkpoint;
pub mod dataset;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{l2_loss_with_grad, ms_ssim_with_grad, MsSsimConfig, RateLoss, RateSet};
use crate::network::{CodecConfig, CodecModel};
use crate::quantizer::{quantize_tensor, ste_backward, Rounding, SteMode};
use crate::seed;
use crate::tensor::Tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use dataset::Dataset;

const INIT_STREAM: u64 = 0x1417;
const NOISE_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rates: RateSet,
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of training after which the rate decays linearly to zero.
    pub decay_start: f64,
    pub patch_size: usize,
    pub seed: u64,
    pub ms_ssim_scales: usize,
    pub ste: SteMode,
    pub dataset: Option<PathBuf>,
    pub max_images: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rates: RateSet::default(),
            epochs: 30,
            batch_size: 8,
            learning_rate: 5e-4,
            decay_start: 0.5,
            patch_size: 64,
            seed: 0,
            ms_ssim_scales: 3,
            ste: SteMode::Identity,
            dataset: None,
            max_images: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.decay_start) {
            return Err(Error::Config(
                "learning_rate must be positive and decay_start in [0, 1]".into(),
            ));
        }
        if self.patch_size == 0 || self.patch_size % 8 != 0 {
            return Err(Error::Config(format!(
                "patch_size must be a positive multiple of 8, got {}",
                self.patch_size
            )));
        }
        let fits = crate::metrics::max_scales(self.patch_size, self.patch_size, 11);
        if self.ms_ssim_scales == 0 || self.ms_ssim_scales > fits {
            return Err(Error::Config(format!(
                "{} MS-SSIM scales do not fit {}x{} patches (max {fits})",
                self.ms_ssim_scales, self.patch_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate for `step` of `total_steps`: constant, then linear to zero.
    pub fn learning_rate_at(&self, step: u64, total_steps: u64) -> f64 {
        let progress = step as f64 / total_steps.max(1) as f64;
        if progress < self.decay_start {
            self.learning_rate
        } else {
            self.learning_rate * ((1.0 - progress) / (1.0 - self.decay_start)).clamp(0.0, 1.0)
        }
    }

    fn ms_ssim_config(&self) -> Result<MsSsimConfig> {
        MsSsimConfig::new(self.ms_ssim_scales, 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub learning_rate: f64,
    pub loss: RateLoss,
    pub decoder_passes: usize,
}

/// One optimization step on a batch in `[-1, 1]`. Gradients are accumulated
/// from scratch, Adam is applied with `lr`, then GDN constraints are restored.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut CodecModel,
    optimizer: &mut Adam,
    batch: &Tensor,
    rates: &RateSet,
    ms_cfg: &MsSsimConfig,
    ste: SteMode,
    noise_seed: u64,
    lr: f64,
) -> Result<(RateLoss, usize)> {
    model.zero_grad();
    let (code, enc_tape) = model.encoder.forward_taped(batch)?;
    let mut code_grad = Tensor::zeros(code.shape());
    let mut loss = RateLoss {
        total: 0.0,
        l2: Vec::with_capacity(rates.len()),
        ms_ssim: Vec::with_capacity(rates.len()),
    };
    let mut passes = 0;
    for &bits in rates.bits() {
        let q = quantize_tensor(
            &code,
            bits,
            Rounding::Stochastic {
                seed: seed::derive(noise_seed, &[bits as u64]),
            },
        )?;
        let (recon, dec_tape) = model.decoder.forward_taped(&q.dequantized)?;
        passes += 1;
        let (l2, g_l2) = l2_loss_with_grad(batch, &recon)?;
        let (ms, g_ms) = ms_ssim_with_grad(batch, &recon, ms_cfg)?;
        if !l2.is_finite() || !ms.is_finite() {
            let (lo, hi, mean_abs) = recon.stats();
            let (clo, chi, cmean) = code.stats();
            return Err(Error::NonFinite {
                step: optimizer.t,
                diagnostics: format!(
                    "B={bits}: l2={l2} ms_ssim={ms}; output min {lo} max {hi} mean|.| {mean_abs}; code min {clo} max {chi} mean|.| {cmean}"
                ),
            });
        }
        loss.l2.push(l2);
        loss.ms_ssim.push(ms);
        let grad = g_l2.zip_map(&g_ms, "train_step", |a, b| 2.0 * a - b)?;
        let g_code = model.decoder.backward(&grad, &dec_tape)?;
        let g_code = ste_backward(&g_code, &q.clamped, ste)?;
        for (acc, g) in code_grad.data_mut().iter_mut().zip(g_code.data()) {
            *acc += g;
        }
    }
    loss.total = 2.0 * loss.l2.iter().sum::<f64>() - loss.ms_ssim.iter().sum::<f64>();
    model.encoder.backward(&code_grad, &enc_tape)?;
    let mut params = model.params_mut();
    if let Some(bad) = params
        .iter()
        .position(|p| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
    {
        return Err(Error::NonFinite {
            step: optimizer.t,
            diagnostics: format!("non-finite gradient in parameter tensor {bad}"),
        });
    }
    optimizer.step(&mut params, lr)?;
    model.project();
    Ok((loss, passes))
}

/// Model, optimizer state and progress counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: CodecModel,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(codec: CodecConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = CodecModel::new(codec, seed::derive(config.seed, &[INIT_STREAM]))?;
        let optimizer = Adam::new(&model.params());
        Ok(Trainer {
            model,
            optimizer,
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Runs one epoch, calling `on_step` after every step.
    pub fn train_epoch(&mut self, data: &Dataset, on_step: &mut dyn FnMut(&StepReport)) -> Result<()> {
        let batches = data.batches_per_epoch(self.config.batch_size);
        let total = self.config.epochs * batches as u64;
        let ms_cfg = self.config.ms_ssim_config()?;
        for index in 0..batches {
            let batch = data.batch(
                self.config.seed,
                self.epoch,
                index,
                self.config.batch_size,
                self.config.patch_size,
            )?;
            let lr = self.config.learning_rate_at(self.step, total);
            let noise = seed::derive(self.config.seed, &[NOISE_STREAM, self.step]);
            let (loss, passes) = train_step(
                &mut self.model,
                &mut self.optimizer,
                &batch,
                &self.config.rates,
                &ms_cfg,
                self.config.ste,
                noise,
                lr,
            )?;
            let report = StepReport {
                step: self.step,
                epoch: self.epoch,
                learning_rate: lr,
                loss,
                decoder_passes: passes,
            };
            self.step += 1;
            on_step(&report);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains until the configured number of epochs is reached.
    pub fn run(&mut self, data: &Dataset, on_step: &mut dyn FnMut(&StepReport)) -> Result<()> {
        while !self.is_finished() {
            self.train_epoch(data, on_step)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_trainer(self)
    }
}

/// CSV header of the training log for `rates`.
pub fn log_header(rates: &RateSet) -> String {
    let mut cols = vec!["step".to_string(), "epoch".into(), "lr".into()];
    cols.extend(rates.bits().iter().map(|b| format!("l2_b{b}")));
    cols.extend(rates.bits().iter().map(|b| format!("msssim_b{b}")));
    cols.push("total".into());
    cols.join(",")
}

pub fn log_row(r: &StepReport) -> String {
    let mut cols = vec![
        r.step.to_string(),
        r.epoch.to_string(),
        format!("{:e}", r.learning_rate),
    ];
    cols.extend(r.loss.l2.iter().map(|v| format!("{v:.6}")));
    cols.extend(r.loss.ms_ssim.iter().map(|v| format!("{v:.6}")));
    cols.push(format!("{:.6}", r.loss.total));
    cols.join(",")
}
