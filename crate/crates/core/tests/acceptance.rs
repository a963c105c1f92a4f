//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use vgc_core::bitstream::{read_stream, write_stream};
use vgc_core::codec::{encode_image, evaluate, EncodeOptions, Evaluation};
use vgc_core::metrics::{ms_ssim, psnr, variable_rate_loss, MsSsimConfig, RateSet};
use vgc_core::network::{CodecConfig, CodecModel};
use vgc_core::quantizer::{dequantize, derive_spec, quantize, quantize_stochastic, Rounding};
use vgc_core::trainer::{Dataset, TrainConfig, Trainer};
use vgc_core::{seed, synthetic, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn gradients() -> Outcome {
    let results = common::run_grad_checks();
    let pass = results.iter().all(|&(_, err, tol)| err < tol);
    let detail = results
        .iter()
        .map(|(name, err, tol)| format!("{name} {err:.1e}/{tol:.0e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(pass, format!("{} trials each; {detail}", common::GRAD_TRIALS))
}

fn random_channel(rng: &mut rand_chacha::ChaCha8Rng, len: usize) -> Vec<f64> {
    let lo = rng.random_range(-20.0..5.0);
    let hi = lo + rng.random_range(0.01..30.0);
    (0..len).map(|_| rng.random_range(lo..=hi)).collect()
}

fn quantizer() -> Outcome {
    let mut rng = seed::rng(31, &[]);

    // Zero maps back to exactly zero under both rounding modes.
    let mut zero_failures = 0;
    let mut specs = 0;
    for i in 0..1000u64 {
        let mut channel = random_channel(&mut rng, 16);
        if i % 10 == 0 {
            channel.fill(0.0);
        }
        for bits in 1..=8 {
            let spec = derive_spec(&channel, bits).unwrap();
            specs += 1;
            for rounding in [Rounding::Nearest, Rounding::Stochastic { seed: i }] {
                let back = dequantize(&quantize(&[0.0; 4], &spec, rounding));
                zero_failures += back.iter().filter(|v| v.to_bits() != 0.0f64.to_bits()).count();
            }
        }
    }

    // The mean stochastic error at a point is zero up to Monte Carlo noise.
    const DRAWS: usize = 100_000;
    let mut biased = Vec::new();
    let mut worst_z: f64 = 0.0;
    for point in 0..20u64 {
        let channel = random_channel(&mut rng, 64);
        let bits = rng.random_range(1..=8u8);
        let spec = derive_spec(&channel, bits).unwrap();
        let c = rng.random_range(spec.cmin as f64..=spec.cmax as f64);
        let q = quantize_stochastic(&vec![c; DRAWS], &spec, seed::derive(32, &[point]));
        let errors: Vec<f64> = dequantize(&q).iter().map(|v| v - c).collect();
        let mean = errors.iter().sum::<f64>() / DRAWS as f64;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (DRAWS - 1) as f64;
        let se = (var / DRAWS as f64).sqrt();
        let z = match (se > 0.0, mean == 0.0) {
            (true, _) => mean.abs() / se,
            (false, true) => 0.0,
            (false, false) => f64::INFINITY,
        };
        worst_z = worst_z.max(z);
        if z >= 3.0 {
            biased.push(point);
        }
    }

    // Every reconstruction lies within one step of its input.
    let mut violations = 0;
    let mut elements = 0;
    for i in 0..100u64 {
        let channel = random_channel(&mut rng, 10_000);
        let bits = rng.random_range(1..=8u8);
        let spec = derive_spec(&channel, bits).unwrap();
        let back = dequantize(&quantize_stochastic(&channel, &spec, i));
        elements += channel.len();
        violations += channel
            .iter()
            .zip(&back)
            .filter(|(c, r)| (*c - *r).abs() > spec.delta)
            .count();
    }

    Outcome::new(
        zero_failures == 0 && biased.is_empty() && violations == 0,
        format!(
            "zero-exact over {specs} specs ({zero_failures} failures); \
             20 points x {DRAWS} draws, worst |mean|/SE {worst_z:.2} (biased: {biased:?}); \
             {violations} bound violations in {elements} elements"
        ),
    )
}

fn round_trips() -> Outcome {
    let plane_failures = common::plane_round_trips(1000);

    let model = common::fuzz_model();
    let mut rewrite_failures = 0;
    for (i, qp) in [None, Some(10), Some(30)].into_iter().enumerate() {
        let img = synthetic::image(400 + i as u64, 23 + 8 * i, 17 + 5 * i);
        let bytes = encode_image(
            &model,
            &img,
            &EncodeOptions {
                bits: 6,
                enhancement_qp: qp,
            },
        )
        .unwrap()
        .bytes;
        let stream = read_stream(&bytes).unwrap();
        let payloads: Vec<Vec<u8>> = stream.channel_payloads.iter().map(|p| p.to_vec()).collect();
        if write_stream(&stream.header, &payloads, stream.enhancement_payload).unwrap() != bytes {
            rewrite_failures += 1;
        }
    }

    let fuzz = common::fuzz_bitstream(10_000);
    Outcome::new(
        plane_failures == 0 && rewrite_failures == 0 && fuzz.accepted == 0 && fuzz.mutations >= 10_000,
        format!(
            "{plane_failures}/1000 planes failed; {rewrite_failures}/3 streams not reproduced by rewrite; \
             {} mutations, {} rejected, {} decoded silently",
            fuzz.mutations, fuzz.rejected, fuzz.accepted
        ),
    )
}

/// Model for the rate behaviour criteria, with its training time.
fn train_desk_model() -> (CodecModel, f64) {
    let start = Instant::now();
    let codec = CodecConfig {
        hidden_width: 32,
        ..CodecConfig::default()
    };
    let train = TrainConfig {
        rates: RateSet::new([2, 4, 8]).unwrap(),
        epochs: 30,
        patch_size: 64,
        ..TrainConfig::default()
    };
    let data = Dataset::from_images((0..64).map(|i| synthetic::image(i, 96, 96)).collect()).unwrap();
    let mut trainer = Trainer::new(codec, train).unwrap();
    trainer.run(&data, &mut |_| {}).unwrap();
    (trainer.model, start.elapsed().as_secs_f64())
}

fn held_out() -> Vec<Tensor> {
    (0..8).map(|i| synthetic::image(1000 + i, 256, 256)).collect()
}

fn corpus_average(model: &CodecModel, images: &[Tensor], opts: &EncodeOptions) -> Evaluation {
    let evals: Vec<Evaluation> = images.iter().map(|img| evaluate(model, img, opts).unwrap()).collect();
    let n = evals.len() as f64;
    let avg = |f: fn(&Evaluation) -> f64| evals.iter().map(f).sum::<f64>() / n;
    Evaluation {
        bits: opts.bits,
        qp: opts.enhancement_qp,
        bpp: avg(|e| e.bpp),
        base_fraction: avg(|e| e.base_fraction),
        psnr_db: avg(|e| e.psnr_db),
        ms_ssim: avg(|e| e.ms_ssim),
    }
}

fn variable_rate(model: &CodecModel, train_secs: f64, images: &[Tensor]) -> Outcome {
    let curve: Vec<Evaluation> = (2..=8)
        .map(|bits| {
            let opts = EncodeOptions {
                bits,
                enhancement_qp: None,
            };
            corpus_average(model, images, &opts)
        })
        .collect();
    let ms_ok = curve.windows(2).all(|w| w[1].ms_ssim >= w[0].ms_ssim);
    let bpp_ok = curve.windows(2).all(|w| w[1].bpp > w[0].bpp);
    let points = curve
        .iter()
        .map(|e| format!("B{} {:.3}bpp/{:.4}", e.bits, e.bpp, e.ms_ssim))
        .collect::<Vec<_>>()
        .join(" ");
    Outcome::new(
        ms_ok && bpp_ok,
        format!("trained in {train_secs:.0}s; MS-SSIM non-decreasing: {ms_ok}, bpp increasing: {bpp_ok}; {points}"),
    )
}

fn enhancement(model: &CodecModel, images: &[Tensor]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for bits in [2, 4] {
        let base = corpus_average(
            model,
            images,
            &EncodeOptions {
                bits,
                enhancement_qp: None,
            },
        );
        for qp in [1, 4, 10] {
            let opts = EncodeOptions {
                bits,
                enhancement_qp: Some(qp),
            };
            let enhanced = corpus_average(model, images, &opts);
            pass &= enhanced.psnr_db > base.psnr_db;
            parts.push(format!("B{bits} qp{qp} {:.2}->{:.2}dB", base.psnr_db, enhanced.psnr_db));
        }
    }
    let mut split_errors = 0;
    for img in images {
        for qp in [None, Some(4), Some(10), Some(40)] {
            let r = encode_image(
                model,
                img,
                &EncodeOptions {
                    bits: 4,
                    enhancement_qp: qp,
                },
            )
            .unwrap()
            .report;
            let bytes_ok = r.base_bytes + r.enhancement_bytes == r.total_bytes;
            if !bytes_ok || r.base_bpp + r.enhancement_bpp != r.bpp {
                split_errors += 1;
            }
        }
    }
    Outcome::new(
        pass && split_errors == 0,
        format!("{}; {split_errors} inexact base/enhancement splits", parts.join(", ")),
    )
}

fn loss_arithmetic() -> Outcome {
    let x = synthetic::image(77, 64, 64).map(|v| v / 127.5 - 1.0);
    let rates = RateSet::new([2, 4, 8]).unwrap();
    let recons = vec![x.clone(); 3];
    let loss = variable_rate_loss(&x, &recons, &rates, &MsSsimConfig::new(3, 2.0).unwrap())
        .unwrap()
        .total;

    let img = synthetic::image(78, 256, 256);
    let self_sim = ms_ssim(&img, &img, &MsSsimConfig::new(5, 255.0).unwrap()).unwrap();

    let a = Tensor::filled([1, 3, 32, 32], 100.0);
    let b = Tensor::filled([1, 3, 32, 32], 116.0);
    let db = psnr(&a, &b, 255.0).unwrap();

    Outcome::new(
        loss == -3.0 && (self_sim - 1.0).abs() <= 1e-9 && (db - 24.05).abs() <= 0.01,
        format!("loss {loss}, MS-SSIM(x, x) = {self_sim}, PSNR at constant difference 16 = {db:.4} dB"),
    )
}

fn determinism(model: &CodecModel) -> Outcome {
    let img = synthetic::image(90, 75, 61);
    let opts = EncodeOptions {
        bits: 5,
        enhancement_qp: Some(20),
    };
    let first = encode_image(model, &img, &opts).unwrap().bytes;
    let second = encode_image(model, &img, &opts).unwrap().bytes;
    let encode_ok = first == second;

    let trajectory = || {
        let codec = CodecConfig {
            code_channels: 4,
            hidden_width: 8,
            ..CodecConfig::default()
        };
        let train = TrainConfig {
            epochs: 30,
            batch_size: 4,
            patch_size: 32,
            ms_ssim_scales: 2,
            seed: 7,
            ..TrainConfig::default()
        };
        let data = Dataset::from_images((0..16).map(|i| synthetic::image(500 + i, 40, 40)).collect()).unwrap();
        let mut trainer = Trainer::new(codec, train).unwrap();
        let mut losses = Vec::new();
        trainer
            .run(&data, &mut |r| losses.push(r.loss.total.to_bits()))
            .unwrap();
        losses
    };
    let (a, b) = (trajectory(), trajectory());
    let train_ok = a == b && a.len() >= 100;
    Outcome::new(
        encode_ok && train_ok,
        format!(
            "{} byte stream identical: {encode_ok}; {} step loss trajectories bit-identical: {train_ok}",
            first.len(),
            a.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = run();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} [{id}] {name} ({:.1}s): {}",
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
        if !outcome.pass {
            failed += 1;
        }
    };

    report(1, "gradient correctness", &mut gradients);
    report(2, "quantizer properties", &mut quantizer);
    report(3, "lossless round trips", &mut round_trips);
    let (model, train_secs) = train_desk_model();
    let images = held_out();
    report(4, "variable-rate behaviour", &mut || {
        variable_rate(&model, train_secs, &images)
    });
    report(5, "enhancement layer", &mut || enhancement(&model, &images));
    report(6, "loss arithmetic", &mut loss_arithmetic);
    report(7, "determinism", &mut || determinism(&model));

    if failed == 0 {
        println!("acceptance: all 7 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 7 criteria failed");
        ExitCode::FAILURE
    }
}
