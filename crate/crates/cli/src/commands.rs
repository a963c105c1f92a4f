use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vgc_core::codec::{decode_image, encode_image, evaluate, EncodeOptions, Evaluation};
use vgc_core::image_io::{load_image, save_image};
use vgc_core::metrics::RateSet;
use vgc_core::network::{CodecConfig, CodecModel};
use vgc_core::trainer::{log_header, log_row, Checkpoint, Dataset, TrainConfig, Trainer};
use vgc_core::{Error, Result, Tensor};

use crate::{CheckpointArg, DecodeArgs, EncodeArgs, EvalArgs, LayerArgs, SweepArgs, TrainArgs};

pub const DEFAULT_QP: u8 = 30;
const CHECKPOINT_FILE: &str = "model.ckpt";
const CSV_HEADER: &str = "point_id,B,qp,bpp,bpp_base_frac,psnr_db,ms_ssim,image,status";

/// Hidden width used by `train` unless the config file or a flag says otherwise.
pub const DESK_HIDDEN_WIDTH: usize = 32;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    codec: toml::Table,
    train: TrainConfig,
}

/// Architecture for a fresh run: the desk-scale preset with any keys from
/// the config file's `[codec]` table laid over it.
fn codec_config(overrides: toml::Table) -> Result<CodecConfig> {
    let preset = CodecConfig {
        hidden_width: DESK_HIDDEN_WIDTH,
        ..CodecConfig::default()
    };
    let mut table = toml::Table::try_from(preset).map_err(|e| Error::Config(e.to_string()))?;
    table.extend(overrides);
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

pub fn parse_point(s: &str) -> std::result::Result<(u8, u8), String> {
    let (b, qp) = s.split_once(':').ok_or_else(|| format!("expected B:qp, got {s:?}"))?;
    let b: u8 = b.trim().parse().map_err(|_| format!("bad bit depth in {s:?}"))?;
    let qp: u8 = qp.trim().parse().map_err(|_| format!("bad qp in {s:?}"))?;
    if !(1..=8).contains(&b) || !(1..=51).contains(&qp) {
        return Err(format!("{s:?} out of range (B in 1..=8, qp in 1..=51)"));
    }
    Ok((b, qp))
}

fn resolve(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn checkpoint_path(arg: &CheckpointArg) -> Result<PathBuf> {
    arg.checkpoint
        .as_deref()
        .map(resolve)
        .ok_or_else(|| Error::InvalidArgument("no checkpoint given (use --checkpoint or VGC_CHECKPOINT_DIR)".into()))
}

fn load_model(arg: &CheckpointArg) -> Result<CodecModel> {
    let path = checkpoint_path(arg)?;
    log::debug!("loading {}", path.display());
    Checkpoint::load(&path)?.model()
}

fn options(layer: &LayerArgs) -> EncodeOptions {
    EncodeOptions {
        bits: layer.bits,
        enhancement_qp: (!layer.no_enhancement).then_some(layer.qp),
    }
}

/// Writes via a temporary file so an interrupted save never leaves a torn checkpoint.
fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    trainer.checkpoint().save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fresh_trainer(args: &TrainArgs) -> Result<Trainer> {
    let file: ConfigFile = match &args.config {
        Some(path) => toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?,
        None => ConfigFile::default(),
    };
    let mut codec = codec_config(file.codec)?;
    let mut train = file.train;
    if let Some(v) = args.seed {
        train.seed = v;
    }
    if let Some(v) = args.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        train.learning_rate = v;
    }
    if let Some(v) = args.patch_size {
        train.patch_size = v;
    }
    if let Some(v) = args.max_images {
        train.max_images = Some(v);
    }
    if let Some(v) = &args.rates {
        train.rates = RateSet::new(v.iter().copied())?;
    }
    if let Some(v) = args.hidden_width {
        codec.hidden_width = v;
    }
    if let Some(v) = args.code_channels {
        codec.code_channels = v;
    }
    if let Some(v) = args.block_kind {
        codec.block_kind = v;
    }
    Trainer::new(codec, train)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let out = match args.out.as_deref().or(args.checkpoint.checkpoint.as_deref()) {
        Some(p) => resolve(p),
        None => {
            return Err(Error::InvalidArgument(
                "no output checkpoint given (use --out, --checkpoint or VGC_CHECKPOINT_DIR)".into(),
            ))
        }
    };
    let mut trainer = match &args.resume {
        Some(path) => {
            let t = Checkpoint::load(&resolve(path))?.into_trainer()?;
            log::info!("resuming at epoch {} step {}", t.epoch, t.step);
            t
        }
        None => fresh_trainer(&args)?,
    };
    if let Some(epochs) = args.epochs {
        trainer.config.epochs = epochs;
        trainer.config.validate()?;
    }
    if let Some(dir) = &args.data {
        trainer.config.dataset = Some(dir.clone());
    }
    let dir = trainer
        .config
        .dataset
        .clone()
        .ok_or_else(|| Error::InvalidArgument("no training data given (use --data)".into()))?;
    let data = Dataset::load_dir(&dir, trainer.config.max_images)?;
    log::info!(
        "{} images, {} parameters, rates {:?}",
        data.len(),
        trainer.model.param_count(),
        trainer.config.rates.bits()
    );

    let mut log_file = match &args.log {
        Some(path) => {
            let fresh = args.resume.is_none() || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(path)?;
            if fresh {
                writeln!(f, "{}", log_header(&trainer.config.rates))?;
            }
            Some(f)
        }
        None => None,
    };

    while !trainer.is_finished() {
        let mut write_err = None;
        trainer.train_epoch(&data, &mut |r| {
            log::debug!("step {} loss {:.4}", r.step, r.loss.total);
            if let Some(f) = log_file.as_mut() {
                if let Err(e) = writeln!(f, "{}", log_row(r)) {
                    write_err.get_or_insert(e);
                }
            }
        })?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        save_checkpoint(&trainer, &out)?;
        log::info!(
            "epoch {}/{} done, checkpoint {}",
            trainer.epoch,
            trainer.config.epochs,
            out.display()
        );
    }
    Ok(())
}

pub fn encode(args: EncodeArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let image = load_image(&args.input)?;
    let encoded = encode_image(&model, &image, &options(&args.layer))?;
    fs::write(&args.out, &encoded.bytes)?;
    let r = &encoded.report;
    println!(
        "{}: {} bytes, {:.4} bpp (base {:.4}, enhancement {:.4})",
        args.out.display(),
        r.total_bytes,
        r.bpp,
        r.base_bpp,
        r.enhancement_bpp
    );
    Ok(())
}

pub fn decode(args: DecodeArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let bytes = fs::read(&args.input)?;
    let decoded = decode_image(&model, &bytes)?;
    save_image(&args.out, &decoded.image)?;
    if let Some(path) = &args.base_out {
        save_image(path, &decoded.base)?;
    }
    println!(
        "{}: {}x{}, {:.4} bpp",
        args.out.display(),
        decoded.image.width(),
        decoded.image.height(),
        decoded.report.bpp
    );
    Ok(())
}

fn csv_row(point: usize, opts: &EncodeOptions, image: &str, result: &Result<Evaluation>) -> String {
    let qp = opts.enhancement_qp.map(|q| q.to_string()).unwrap_or_default();
    match result {
        Ok(e) => format!(
            "{point},{},{qp},{:.6},{:.6},{:.4},{:.6},{image},ok",
            opts.bits, e.bpp, e.base_fraction, e.psnr_db, e.ms_ssim
        ),
        Err(err) => format!(
            "{point},{},{qp},,,,,{image},failed: {}",
            opts.bits,
            err.to_string().replace([',', '\n'], " ")
        ),
    }
}

fn mean_row(point: usize, opts: &EncodeOptions, results: &[Result<Evaluation>]) -> String {
    let ok: Vec<&Evaluation> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    if ok.is_empty() {
        return csv_row(
            point,
            opts,
            "mean",
            &Err(Error::InvalidArgument("no image succeeded".into())),
        );
    }
    let n = ok.len() as f64;
    let avg = |f: fn(&Evaluation) -> f64| ok.iter().map(|e| f(e)).sum::<f64>() / n;
    let e = Evaluation {
        bits: opts.bits,
        qp: opts.enhancement_qp,
        bpp: avg(|e| e.bpp),
        base_fraction: avg(|e| e.base_fraction),
        psnr_db: avg(|e| e.psnr_db),
        ms_ssim: avg(|e| e.ms_ssim),
    };
    let mut row = csv_row(point, opts, "mean", &Ok(e));
    if ok.len() < results.len() {
        row = row.replace(",ok", &format!(",partial {}/{}", ok.len(), results.len()));
    }
    row
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<(String, Tensor)>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string().replace(',', "_"), load_image(p)?)))
        .collect()
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

/// Evaluates every image at every point. Returns the number of failed evaluations.
fn run_points(
    model: &CodecModel,
    images: &[(String, Tensor)],
    points: &[EncodeOptions],
    out: &mut dyn Write,
) -> Result<usize> {
    writeln!(out, "{CSV_HEADER}")?;
    let mut failures = 0;
    for (id, opts) in points.iter().enumerate() {
        let results: Vec<Result<Evaluation>> = images.iter().map(|(_, img)| evaluate(model, img, opts)).collect();
        for ((name, _), r) in images.iter().zip(&results) {
            if let Err(e) = r {
                log::warn!("point {id} (B={}) failed on {name}: {e}", opts.bits);
                failures += 1;
            }
            writeln!(out, "{}", csv_row(id, opts, name, r))?;
        }
        if images.len() > 1 {
            writeln!(out, "{}", mean_row(id, opts, &results))?;
        }
    }
    out.flush()?;
    Ok(failures)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let images = load_all(&args.images)?;
    let mut out = output(&args.out)?;
    let failures = run_points(&model, &images, &[options(&args.layer)], &mut *out)?;
    if failures == images.len() {
        return Err(Error::InvalidArgument("every evaluation failed".into()));
    }
    Ok(())
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let images = load_all(&args.images)?;
    let points: Vec<EncodeOptions> = args
        .points
        .iter()
        .map(|&(bits, qp)| EncodeOptions {
            bits,
            enhancement_qp: (!args.no_enhancement).then_some(qp),
        })
        .collect();
    let mut out = output(&args.out)?;
    let failures = run_points(&model, &images, &points, &mut *out)?;
    if failures > 0 {
        log::warn!("{failures} of {} evaluations failed", points.len() * images.len());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_parse_and_validate() {
        assert_eq!(parse_point("3:50"), Ok((3, 50)));
        assert_eq!(parse_point(" 8 : 1 "), Ok((8, 1)));
        for bad in ["3", "0:10", "9:10", "3:0", "3:52", "a:b"] {
            assert!(parse_point(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn codec_preset_takes_file_overrides() {
        assert_eq!(
            codec_config(toml::Table::new()).unwrap().hidden_width,
            DESK_HIDDEN_WIDTH
        );
        let table: toml::Table = toml::from_str("hidden_width = 12\ncode_channels = 4").unwrap();
        let cfg = codec_config(table).unwrap();
        assert_eq!((cfg.hidden_width, cfg.code_channels), (12, 4));
        let bad: toml::Table = toml::from_str("hidden_widht = 12").unwrap();
        assert!(codec_config(bad).is_err());
    }

    #[test]
    fn failed_rows_keep_column_count() {
        let opts = EncodeOptions {
            bits: 4,
            enhancement_qp: None,
        };
        let row = csv_row(2, &opts, "x.png", &Err(Error::InvalidArgument("a, b".into())));
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
        assert!(row.ends_with("failed: invalid argument: a  b"));
    }
}
