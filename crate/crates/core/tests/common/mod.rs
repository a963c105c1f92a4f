//! Shared checks for the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vgc_core::codec::{decode_image, encode_image, EncodeOptions};
use vgc_core::entropy::{decode_plane, encode_plane, SymbolPlane};
use vgc_core::gdn::{
    gdn_backward, gdn_forward, igdn_backward, igdn_forward, res_block_backward, res_block_forward,
    res_block_forward_taped, BlockVariant, GdnParams, ResBlockParams,
};
use vgc_core::metrics::{
    l2_loss, l2_loss_with_grad, ms_ssim, ms_ssim_with_grad, variable_rate_loss, variable_rate_loss_with_grad,
    MsSsimConfig, RateSet,
};
use vgc_core::network::{BlockKind, CodecConfig, CodecModel};
use vgc_core::tensor::{conv_backward, conv_forward, ConvKernel, ConvMode};
use vgc_core::{seed, synthetic, Tensor};

/// Step of the fourth-order central difference for single operators.
pub const STEP: f64 = 1e-5;
/// Larger step for the full network, whose loss is large enough that
/// round-off dominates at `STEP`. The path has no ReLU kinks to straddle.
pub const END_TO_END_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;
/// Coordinates sampled per checked tensor.
pub const SAMPLES: usize = 12;

pub fn random(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn relative(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Largest relative error between `analytic[v]` and central differences of
/// `loss` with respect to `views(state)[v]`, over sampled coordinates.
pub fn max_rel_error<S: Clone>(
    state: &S,
    loss: impl Fn(&S) -> f64,
    views: impl Fn(&mut S) -> Vec<&mut [f64]>,
    analytic: &[Vec<f64>],
    step: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut probe = state.clone();
    let lens: Vec<usize> = views(&mut probe).iter().map(|v| v.len()).collect();
    assert_eq!(lens.len(), analytic.len(), "one analytic gradient per view");
    let mut worst: f64 = 0.0;
    for (v, &len) in lens.iter().enumerate() {
        assert_eq!(len, analytic[v].len(), "gradient length for view {v}");
        let picks: Vec<usize> = if len <= SAMPLES {
            (0..len).collect()
        } else {
            (0..SAMPLES).map(|_| rng.random_range(0..len)).collect()
        };
        for i in picks {
            let at = |offset: f64| {
                let mut s = state.clone();
                views(&mut s)[v][i] += offset;
                loss(&s)
            };
            let numeric = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
            worst = worst.max(relative(analytic[v][i], numeric));
        }
    }
    worst
}

fn project(t: &Tensor, proj: &Tensor) -> f64 {
    t.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

fn kernel(out: usize, inp: usize, k: usize, mode: ConvMode, rng: &mut ChaCha8Rng) -> ConvKernel {
    let scale = 1.0 / ((inp * k * k) as f64).sqrt();
    ConvKernel::from_parts(
        random([out, inp, k, k], -scale, scale, rng),
        random([1, out, 1, 1], -0.1, 0.1, rng),
        mode,
    )
    .unwrap()
}

fn gdn_params(c: usize, rng: &mut ChaCha8Rng) -> GdnParams {
    let beta = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    let gamma = (0..c * c).map(|_| rng.random_range(0.01..0.3)).collect();
    GdnParams::from_parts(beta, gamma).unwrap()
}

#[derive(Clone)]
struct ConvState {
    x: Tensor,
    k: ConvKernel,
    proj: Tensor,
}

pub fn conv_trial(trial: u64) -> f64 {
    let mut rng = seed::rng(11, &[trial]);
    let mut worst: f64 = 0.0;
    for (mode, k) in [(ConvMode::Affine, 3), (ConvMode::Down, 4), (ConvMode::Up, 4)] {
        let x = random([2, 3, 6, 8], -1.0, 1.0, &mut rng);
        let k = kernel(4, 3, k, mode, &mut rng);
        let out = conv_forward(&x, &k).unwrap();
        let proj = random(out.shape(), -1.0, 1.0, &mut rng);
        let g = conv_backward(&proj, &x, &k).unwrap();
        let state = ConvState { x, k, proj };
        worst = worst.max(max_rel_error(
            &state,
            |s| project(&conv_forward(&s.x, &s.k).unwrap(), &s.proj),
            |s| vec![s.x.data_mut(), s.k.weight.data_mut(), s.k.bias.data_mut()],
            &[g.input.into_data(), g.weight.into_data(), g.bias.into_data()],
            STEP,
            &mut rng,
        ));
    }
    worst
}

#[derive(Clone)]
struct NormState {
    x: Tensor,
    p: GdnParams,
    proj: Tensor,
}

fn norm_trial(trial: u64, inverse: bool) -> f64 {
    let mut rng = seed::rng(if inverse { 13 } else { 12 }, &[trial]);
    let x = random([2, 5, 4, 3], -2.0, 2.0, &mut rng);
    let p = gdn_params(5, &mut rng);
    let proj = random(x.shape(), -1.0, 1.0, &mut rng);
    let forward = if inverse { igdn_forward } else { gdn_forward };
    let g = if inverse {
        igdn_backward(&proj, &x, &p)
    } else {
        gdn_backward(&proj, &x, &p)
    }
    .unwrap();
    let state = NormState { x, p, proj };
    max_rel_error(
        &state,
        |s| project(&forward(&s.x, &s.p).unwrap(), &s.proj),
        |s| vec![s.x.data_mut(), s.p.beta.data_mut(), s.p.gamma.data_mut()],
        &[g.input.into_data(), g.beta.into_data(), g.gamma.into_data()],
        STEP,
        &mut rng,
    )
}

pub fn gdn_trial(trial: u64) -> f64 {
    norm_trial(trial, false)
}

pub fn igdn_trial(trial: u64) -> f64 {
    norm_trial(trial, true)
}

#[derive(Clone)]
struct BlockState {
    x: Tensor,
    p: ResBlockParams,
    proj: Tensor,
}

pub fn block_trial(trial: u64) -> f64 {
    let mut rng = seed::rng(14, &[trial]);
    let mut worst: f64 = 0.0;
    for variant in [BlockVariant::ResGdn, BlockVariant::ResIgdn, BlockVariant::ResRelu] {
        let n = 4;
        let convs = [
            kernel(n, n, 3, ConvMode::Affine, &mut rng),
            kernel(n, n, 3, ConvMode::Affine, &mut rng),
        ];
        let norms = match variant {
            BlockVariant::ResRelu => [None, None],
            _ => [Some(gdn_params(n, &mut rng)), Some(gdn_params(n, &mut rng))],
        };
        let p = ResBlockParams::new(variant, convs, norms).unwrap();
        let x = random([1, n, 5, 6], -1.0, 1.0, &mut rng);
        let proj = random(x.shape(), -1.0, 1.0, &mut rng);
        let (_, tape) = res_block_forward_taped(&x, &p).unwrap();
        let (gx, grads) = res_block_backward(&proj, &tape, &p).unwrap();
        let mut analytic = vec![
            gx.into_data(),
            grads.convs[0].weight.data().to_vec(),
            grads.convs[1].weight.data().to_vec(),
            grads.convs[1].bias.data().to_vec(),
        ];
        let has_norms = variant != BlockVariant::ResRelu;
        if has_norms {
            let norm = |i: usize| grads.norms[i].as_ref().unwrap();
            analytic.extend([
                norm(0).beta.data().to_vec(),
                norm(0).gamma.data().to_vec(),
                norm(1).gamma.data().to_vec(),
            ]);
        }
        let state = BlockState { x, p, proj };
        worst = worst.max(max_rel_error(
            &state,
            |s| project(&res_block_forward(&s.x, &s.p).unwrap(), &s.proj),
            |s| {
                let BlockState { x, p, .. } = s;
                let [c0, c1] = &mut p.convs;
                let mut v = vec![
                    x.data_mut(),
                    c0.weight.data_mut(),
                    c1.weight.data_mut(),
                    c1.bias.data_mut(),
                ];
                if let [Some(n0), Some(n1)] = &mut p.norms {
                    v.extend([n0.beta.data_mut(), n0.gamma.data_mut(), n1.gamma.data_mut()]);
                }
                v
            },
            &analytic,
            STEP,
            &mut rng,
        ));
    }
    worst
}

#[derive(Clone)]
struct PairState {
    x: Tensor,
    ys: Vec<Tensor>,
}

fn near(x: &Tensor, spread: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|v| (v + rng.random_range(-spread..spread)).clamp(-1.0, 1.0))
        .collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

pub fn ms_ssim_trial(trial: u64) -> f64 {
    let mut rng = seed::rng(15, &[trial]);
    let x = synthetic::image(trial, 44, 44).map(|v| v / 127.5 - 1.0);
    let x = Tensor::concat_batch(&[x.clone(), x.map(|v| -v)]).unwrap();
    let y = near(&x, 0.3, &mut rng);
    let cfg = MsSsimConfig::new(3, 2.0).unwrap();
    let (_, g) = ms_ssim_with_grad(&x, &y, &cfg).unwrap();
    max_rel_error(
        &PairState { x, ys: vec![y] },
        |s| ms_ssim(&s.x, &s.ys[0], &cfg).unwrap(),
        |s| vec![s.ys[0].data_mut()],
        &[g.into_data()],
        STEP,
        &mut rng,
    )
}

pub fn composite_trial(trial: u64) -> f64 {
    let mut rng = seed::rng(16, &[trial]);
    let x = synthetic::image(100 + trial, 24, 24).map(|v| v / 127.5 - 1.0);
    let x = Tensor::concat_batch(&[x.clone(), x.map(|v| v * 0.5)]).unwrap();
    let rates = RateSet::new([2, 4, 8]).unwrap();
    let ys: Vec<Tensor> = [0.4, 0.2, 0.05].iter().map(|&s| near(&x, s, &mut rng)).collect();
    let cfg = MsSsimConfig::new(2, 2.0).unwrap();
    let (_, grads) = variable_rate_loss_with_grad(&x, &ys, &rates, &cfg).unwrap();
    max_rel_error(
        &PairState { x, ys },
        |s| variable_rate_loss(&s.x, &s.ys, &rates, &cfg).unwrap().total,
        |s| s.ys.iter_mut().map(|y| y.data_mut()).collect(),
        &grads.into_iter().map(Tensor::into_data).collect::<Vec<_>>(),
        STEP,
        &mut rng,
    )
}

#[derive(Clone)]
struct ModelState {
    x: Tensor,
    target: Tensor,
    model: CodecModel,
}

fn end_to_end_loss(s: &ModelState, cfg: &MsSsimConfig) -> f64 {
    let y = s
        .model
        .decoder
        .forward(&s.model.encoder.forward(&s.x).unwrap())
        .unwrap();
    2.0 * l2_loss(&s.target, &y).unwrap() - ms_ssim(&s.target, &y, cfg).unwrap()
}

/// Image through encoder and decoder (quantization bypassed) into
/// `2 * l2 - ms_ssim` against a fixed target, on a 16x16 input.
pub fn end_to_end_trial(trial: u64) -> f64 {
    let mut rng = seed::rng(17, &[trial]);
    let config = CodecConfig {
        code_channels: 2,
        hidden_width: 4,
        block_kind: BlockKind::ResGdn,
        ..CodecConfig::default()
    };
    let mut model = CodecModel::new(config, seed::derive(18, &[trial])).unwrap();
    // Keep every gamma away from its zero bound so both difference probes stay feasible.
    let gdns = model
        .encoder
        .gdn_params_mut()
        .into_iter()
        .chain(model.decoder.gdn_params_mut());
    for p in gdns {
        p.gamma
            .data_mut()
            .iter_mut()
            .for_each(|g| *g += rng.random_range(0.01..0.05));
    }
    let x = synthetic::image(200 + trial, 16, 16).map(|v| v / 127.5 - 1.0);
    let cfg = MsSsimConfig::new(1, 2.0).unwrap();

    model.zero_grad();
    let (code, etape) = model.encoder.forward_taped(&x).unwrap();
    let (y, dtape) = model.decoder.forward_taped(&code).unwrap();
    let (_, gl2) = l2_loss_with_grad(&x, &y).unwrap();
    let (_, gms) = ms_ssim_with_grad(&x, &y, &cfg).unwrap();
    let gy = gl2.zip_map(&gms, "grad", |a, b| 2.0 * a - b).unwrap();
    let gcode = model.decoder.backward(&gy, &dtape).unwrap();
    let gx = model.encoder.backward(&gcode, &etape).unwrap();

    let mut analytic = vec![gx.into_data()];
    analytic.extend(
        model
            .params()
            .iter()
            .map(|p| p.grad().map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)),
    );
    model.zero_grad();
    let state = ModelState {
        target: x.clone(),
        x,
        model,
    };
    max_rel_error(
        &state,
        |s| end_to_end_loss(s, &cfg),
        |s| {
            let mut v = vec![s.x.data_mut()];
            v.extend(s.model.params_mut().into_iter().map(|p| p.data_mut()));
            v
        },
        &analytic,
        END_TO_END_STEP,
        &mut rng,
    )
}

/// A gradient check: name, trial function, and tolerance.
pub type GradCheck = (&'static str, fn(u64) -> f64, f64);

pub const GRAD_CHECKS: [GradCheck; 7] = [
    ("conv", conv_trial, 1e-4),
    ("gdn", gdn_trial, 1e-4),
    ("igdn", igdn_trial, 1e-4),
    ("residual blocks", block_trial, 1e-4),
    ("ms-ssim", ms_ssim_trial, 1e-4),
    ("composite loss", composite_trial, 1e-4),
    ("end to end", end_to_end_trial, 1e-3),
];

pub const GRAD_TRIALS: u64 = 10;

/// Worst relative error of each check over all trials.
pub fn run_grad_checks() -> Vec<(&'static str, f64, f64)> {
    GRAD_CHECKS
        .iter()
        .map(|&(name, f, tol)| (name, (0..GRAD_TRIALS).map(f).fold(0.0, f64::max), tol))
        .collect()
}

/// Random plane with a mix of smooth, constant, and noisy content.
pub fn random_plane(rng: &mut ChaCha8Rng) -> SymbolPlane {
    let bits = rng.random_range(1..=8u8);
    let (w, h) = (rng.random_range(0..40usize), rng.random_range(0..40usize));
    let max = (1u32 << bits) - 1;
    let kind = rng.random_range(0..3);
    let base = rng.random_range(0..=max);
    let symbols = (0..w * h)
        .map(|i| match kind {
            0 => rng.random_range(0..=max),
            1 => base,
            _ => ((base as usize + i % w.max(1) / 3 + i / w.max(1) / 5) as u32).min(max),
        } as u8)
        .collect();
    SymbolPlane::new(w, h, bits, symbols).unwrap()
}

/// Planes that failed to round-trip.
pub fn plane_round_trips(count: u64) -> usize {
    let mut rng = seed::rng(21, &[]);
    (0..count)
        .filter(|_| {
            let plane = random_plane(&mut rng);
            let payload = encode_plane(&plane);
            decode_plane(&payload, plane.width, plane.height, plane.bits).ok() != Some(plane)
        })
        .count()
}

pub fn fuzz_model() -> CodecModel {
    let config = CodecConfig {
        code_channels: 3,
        hidden_width: 6,
        block_kind: BlockKind::ResGdn,
        ..CodecConfig::default()
    };
    CodecModel::new(config, 4).unwrap()
}

/// Outcome counts of a bitstream mutation campaign.
#[derive(Debug, Default)]
pub struct FuzzReport {
    pub mutations: usize,
    pub rejected: usize,
    /// Mutated streams that decoded without error.
    pub accepted: usize,
}

/// Applies `count` random mutations (bit flips, byte overwrites, truncations,
/// insertions, deletions) to real streams and decodes each one.
pub fn fuzz_bitstream(count: usize) -> FuzzReport {
    let model = fuzz_model();
    let streams: Vec<Vec<u8>> = [(3, None), (5, Some(12)), (8, Some(40))]
        .iter()
        .enumerate()
        .map(|(i, &(bits, qp))| {
            let img = synthetic::image(300 + i as u64, 19 + 4 * i, 26);
            let opts = EncodeOptions {
                bits,
                enhancement_qp: qp,
            };
            encode_image(&model, &img, &opts).unwrap().bytes
        })
        .collect();
    let mut rng = seed::rng(22, &[]);
    let mut report = FuzzReport::default();
    while report.mutations < count {
        let original = &streams[report.mutations % streams.len()];
        let mut bytes = original.clone();
        let at = rng.random_range(0..bytes.len());
        match rng.random_range(0..5) {
            0 => bytes[at] ^= 1 << rng.random_range(0..8),
            1 => bytes[at] = rng.random(),
            2 => bytes.truncate(at),
            3 => bytes.insert(at, rng.random()),
            _ => {
                bytes.remove(at);
            }
        }
        if bytes == *original {
            continue;
        }
        report.mutations += 1;
        match decode_image(&model, &bytes) {
            Ok(_) => report.accepted += 1,
            Err(_) => report.rejected += 1,
        }
    }
    report
}
