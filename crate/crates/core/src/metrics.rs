//! Reconstruction losses and quality metrics: L2, MS-SSIM, PSNR and the
//! multi-rate training objective.
//!
//! Gradients are taken with respect to the reconstruction (second argument);
//! the reference image is treated as a constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-scale exponents of the conventional five-scale MS-SSIM.
pub const STANDARD_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// MS-SSIM parameters. `weights[j]` is the exponent for scale `j`, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MsSsimConfig {
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl MsSsimConfig {
    /// Gaussian window 11 with sigma 1.5 and `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`
    /// for data range `L`. With fewer than five scales the leading standard
    /// weights are renormalized to sum to one.
    pub fn new(scales: usize, data_range: f64) -> Result<Self> {
        if !(1..=STANDARD_WEIGHTS.len()).contains(&scales) {
            return Err(Error::InvalidArgument(format!(
                "MS-SSIM scales must be in 1..=5, got {scales}"
            )));
        }
        if !(data_range > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "data range must be positive, got {data_range}"
            )));
        }
        let head = &STANDARD_WEIGHTS[..scales];
        let total: f64 = head.iter().sum();
        let weights = if scales == STANDARD_WEIGHTS.len() {
            head.to_vec()
        } else {
            head.iter().map(|w| w / total).collect()
        };
        Ok(MsSsimConfig {
            weights,
            window: 11,
            sigma: 1.5,
            c1: (0.01 * data_range).powi(2),
            c2: (0.03 * data_range).powi(2),
        })
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }

    fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidArgument(
                "MS-SSIM weights must be positive and non-empty".into(),
            ));
        }
        if self.window == 0 || self.window % 2 == 0 || !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(
                "MS-SSIM window must be odd with positive sigma".into(),
            ));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidArgument("MS-SSIM constants must be positive".into()));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let mid = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Largest number of dyadic scales an `h x w` image supports with `window`.
pub fn max_scales(height: usize, width: usize, window: usize) -> usize {
    let (mut h, mut w, mut m) = (height, width, 0);
    while h >= window && w >= window && m < STANDARD_WEIGHTS.len() {
        m += 1;
        h /= 2;
        w /= 2;
    }
    m
}

/// Bit depths trained jointly. Sorted, unique, each in 1..=8.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct RateSet(Vec<u8>);

impl RateSet {
    pub fn new(bits: impl IntoIterator<Item = u8>) -> Result<Self> {
        let mut v: Vec<u8> = bits.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::InvalidArgument("rate set is empty".into()));
        }
        if let Some(b) = v.iter().find(|b| !(1..=8).contains(*b)) {
            return Err(Error::InvalidArgument(format!("bit depth {b} outside 1..=8")));
        }
        Ok(RateSet(v))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for RateSet {
    fn default() -> Self {
        RateSet(vec![2, 4, 8])
    }
}

impl TryFrom<Vec<u8>> for RateSet {
    type Error = Error;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        RateSet::new(v)
    }
}

impl From<RateSet> for Vec<u8> {
    fn from(r: RateSet) -> Self {
        r.0
    }
}

/// Euclidean norm of `x - y` per batch item, averaged over the batch.
pub fn l2_loss(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(l2_loss_with_grad(x, y)?.0)
}

/// L2 loss and its gradient with respect to `y`. Where an item's difference
/// is exactly zero the (sub)gradient is taken as zero.
pub fn l2_loss_with_grad(x: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    x.ensure_same_shape(y, "l2_loss")?;
    let n = x.batch().max(1) as f64;
    let mut grad = Tensor::zeros(y.shape());
    let mut total = 0.0;
    for i in 0..x.batch() {
        let norm = x
            .item(i)
            .iter()
            .zip(y.item(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += norm;
        if norm > 0.0 {
            for ((g, a), b) in grad.item_mut(i).iter_mut().zip(x.item(i)).zip(y.item(i)) {
                *g = (b - a) / (norm * n);
            }
        }
    }
    Ok((total / n, grad))
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<f64> {
    x.ensure_same_shape(y, "psnr")?;
    if x.is_empty() {
        return Err(Error::InvalidArgument("psnr of empty tensors".into()));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// MS-SSIM averaged over every (item, channel) plane.
pub fn ms_ssim(x: &Tensor, y: &Tensor, cfg: &MsSsimConfig) -> Result<f64> {
    ms_ssim_impl(x, y, cfg, false).map(|(v, _)| v)
}

/// MS-SSIM and its gradient with respect to `y`.
pub fn ms_ssim_with_grad(x: &Tensor, y: &Tensor, cfg: &MsSsimConfig) -> Result<(f64, Tensor)> {
    ms_ssim_impl(x, y, cfg, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn ms_ssim_impl(x: &Tensor, y: &Tensor, cfg: &MsSsimConfig, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    x.ensure_same_shape(y, "ms_ssim")?;
    cfg.validate()?;
    let (h, w) = (x.height(), x.width());
    let fits = max_scales(h, w, cfg.window);
    if fits < cfg.scales() {
        return Err(Error::TooSmallForMsSsim {
            height: h,
            width: w,
            scales: cfg.scales(),
            window: cfg.window,
            max_scales: fits,
        });
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("ms_ssim of empty tensors".into()));
    }
    let kernel = cfg.kernel();
    let planes = x.batch() * x.channels();
    let mut grad = want_grad.then(|| Tensor::zeros(y.shape()));
    let mut total = 0.0;
    for n in 0..x.batch() {
        for c in 0..x.channels() {
            let (v, g) = plane_ms_ssim(x.plane(n, c), y.plane(n, c), h, w, cfg, &kernel, want_grad);
            total += v;
            if let (Some(grad), Some(g)) = (grad.as_mut(), g) {
                for (dst, src) in grad.plane_mut(n, c).iter_mut().zip(g) {
                    *dst = src / planes as f64;
                }
            }
        }
    }
    Ok((total / planes as f64, grad))
}

struct Plane {
    data: Vec<f64>,
    h: usize,
    w: usize,
}

fn avg_pool2(p: &Plane) -> Plane {
    let (h, w) = (p.h / 2, p.w / 2);
    let mut data = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let a = &p.data[2 * i * p.w + 2 * j..];
            let b = &p.data[(2 * i + 1) * p.w + 2 * j..];
            data[i * w + j] = 0.25 * (a[0] + a[1] + b[0] + b[1]);
        }
    }
    Plane { data, h, w }
}

/// Adjoint of `avg_pool2`; rows/columns cropped by the pooling get zero.
fn avg_pool2_backward(g: &Plane, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..g.h {
        for j in 0..g.w {
            let v = 0.25 * g.data[i * g.w + j];
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                out[(2 * i + di) * w + 2 * j + dj] += v;
            }
        }
    }
    out
}

/// Separable "valid" correlation with a symmetric 1-D kernel.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let t = k.len();
    let (oh, ow) = (h + 1 - t, w + 1 - t);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        let src = &data[i * w..(i + 1) * w];
        for j in 0..ow {
            rows[i * ow + j] = k.iter().zip(&src[j..j + t]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for (a, kv) in k.iter().enumerate() {
            let src = &rows[(i + a) * ow..(i + a + 1) * ow];
            for (o, s) in out[i * ow..(i + 1) * ow].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    out
}

/// Adjoint of `filter_valid`: maps an `(h-t+1) x (w-t+1)` gradient to `h x w`.
fn filter_valid_backward(g: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let t = k.len();
    let (oh, ow) = (h + 1 - t, w + 1 - t);
    let mut rows = vec![0.0; h * ow];
    for i in 0..oh {
        for (a, kv) in k.iter().enumerate() {
            let dst = &mut rows[(i + a) * ow..(i + a + 1) * ow];
            for (d, s) in dst.iter_mut().zip(&g[i * ow..(i + 1) * ow]) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let dst = &mut out[i * w..(i + 1) * w];
        for j in 0..ow {
            let v = rows[i * ow + j];
            for (d, kv) in dst[j..j + t].iter_mut().zip(k) {
                *d += kv * v;
            }
        }
    }
    out
}

/// Mean contrast-structure (and full SSIM at the coarsest scale) of one
/// scale, plus the gradient of each mean with respect to `y`.
struct ScaleStats {
    cs: f64,
    ssim: f64,
    d_cs: Option<Vec<f64>>,
    d_ssim: Option<Vec<f64>>,
}

fn scale_stats(x: &Plane, y: &Plane, cfg: &MsSsimConfig, k: &[f64], want_grad: bool, coarsest: bool) -> ScaleStats {
    let (h, w) = (x.h, x.w);
    let xx: Vec<f64> = x.data.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.data.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.data.iter().zip(&y.data).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&x.data, h, w, k);
    let my = filter_valid(&y.data, h, w, k);
    let exx = filter_valid(&xx, h, w, k);
    let eyy = filter_valid(&yy, h, w, k);
    let exy = filter_valid(&xy, h, w, k);
    let count = mx.len() as f64;
    let (c1, c2) = (cfg.c1, cfg.c2);

    let mut cs_sum = 0.0;
    let mut ssim_sum = 0.0;
    // Gradients of the means with respect to (mu_y, E[y^2], E[xy]) maps.
    let mut g_cs = want_grad.then(|| [vec![0.0; mx.len()], vec![0.0; mx.len()], vec![0.0; mx.len()]]);
    let mut g_ssim = (want_grad && coarsest).then(|| [vec![0.0; mx.len()], vec![0.0; mx.len()], vec![0.0; mx.len()]]);
    for p in 0..mx.len() {
        let (ux, uy) = (mx[p], my[p]);
        let sxx = exx[p] - ux * ux;
        let syy = eyy[p] - uy * uy;
        let sxy = exy[p] - ux * uy;
        let a = 2.0 * sxy + c2;
        let b = sxx + syy + c2;
        let cs = a / b;
        let lp = 2.0 * ux * uy + c1;
        let lq = ux * ux + uy * uy + c1;
        let l = lp / lq;
        cs_sum += cs;
        ssim_sum += l * cs;
        if let Some(g) = g_cs.as_mut() {
            let d_exy = 2.0 / b;
            let d_eyy = -a / (b * b);
            let d_my = -2.0 * ux / b + 2.0 * uy * a / (b * b);
            g[0][p] = d_my / count;
            g[1][p] = d_eyy / count;
            g[2][p] = d_exy / count;
            if let Some(gs) = g_ssim.as_mut() {
                let dl_my = 2.0 * ux / lq - lp * 2.0 * uy / (lq * lq);
                gs[0][p] = (l * d_my + dl_my * cs) / count;
                gs[1][p] = l * d_eyy / count;
                gs[2][p] = l * d_exy / count;
            }
        }
    }
    let to_pixels = |g: [Vec<f64>; 3]| -> Vec<f64> {
        let a = filter_valid_backward(&g[0], h, w, k);
        let b = filter_valid_backward(&g[1], h, w, k);
        let c = filter_valid_backward(&g[2], h, w, k);
        (0..h * w)
            .map(|i| a[i] + 2.0 * y.data[i] * b[i] + x.data[i] * c[i])
            .collect()
    };
    ScaleStats {
        cs: cs_sum / count,
        ssim: ssim_sum / count,
        d_cs: g_cs.map(to_pixels),
        d_ssim: g_ssim.map(to_pixels),
    }
}

fn plane_ms_ssim(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    cfg: &MsSsimConfig,
    k: &[f64],
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let m = cfg.scales();
    let mut xs = vec![Plane { data: x.to_vec(), h, w }];
    let mut ys = vec![Plane { data: y.to_vec(), h, w }];
    for _ in 1..m {
        let nx = avg_pool2(xs.last().unwrap());
        let ny = avg_pool2(ys.last().unwrap());
        xs.push(nx);
        ys.push(ny);
    }
    let stats: Vec<ScaleStats> = (0..m)
        .map(|j| scale_stats(&xs[j], &ys[j], cfg, k, want_grad, j == m - 1))
        .collect();
    // Component j: contrast-structure for j < m-1, full SSIM at the coarsest.
    // Negative components are clamped to zero before the fractional power.
    let comps: Vec<f64> = stats
        .iter()
        .enumerate()
        .map(|(j, s)| if j == m - 1 { s.ssim } else { s.cs }.max(0.0))
        .collect();
    let factors: Vec<f64> = comps.iter().zip(&cfg.weights).map(|(c, wt)| c.powf(*wt)).collect();
    let value: f64 = factors.iter().product();
    if !want_grad {
        return (value, None);
    }

    let mut carry: Option<Vec<f64>> = None;
    for j in (0..m).rev() {
        let (sh, sw) = (xs[j].h, xs[j].w);
        let mut local = carry.take().unwrap_or_else(|| vec![0.0; sh * sw]);
        if comps[j] > 0.0 {
            let others: f64 = factors
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .map(|(_, f)| f)
                .product();
            let scale = cfg.weights[j] * comps[j].powf(cfg.weights[j] - 1.0) * others;
            let d = if j == m - 1 { &stats[j].d_ssim } else { &stats[j].d_cs };
            for (l, g) in local.iter_mut().zip(d.as_ref().expect("gradient computed")) {
                *l += scale * g;
            }
        }
        if j > 0 {
            let g = Plane {
                data: local,
                h: sh,
                w: sw,
            };
            carry = Some(avg_pool2_backward(&g, ys[j - 1].h, ys[j - 1].w));
        } else {
            carry = Some(local);
        }
    }
    (value, carry)
}

/// Per-rate terms and total of the multi-rate objective.
#[derive(Clone, Debug, PartialEq)]
pub struct RateLoss {
    pub total: f64,
    pub l2: Vec<f64>,
    pub ms_ssim: Vec<f64>,
}

/// `2 * sum_B l2(x, x_B) - sum_B ms_ssim(x, x_B)`; `recons[i]` pairs with
/// `rates.bits()[i]`.
pub fn variable_rate_loss(x: &Tensor, recons: &[Tensor], rates: &RateSet, cfg: &MsSsimConfig) -> Result<RateLoss> {
    variable_rate_impl(x, recons, rates, cfg, false).map(|(l, _)| l)
}

/// The multi-rate objective and its gradient with respect to each reconstruction.
pub fn variable_rate_loss_with_grad(
    x: &Tensor,
    recons: &[Tensor],
    rates: &RateSet,
    cfg: &MsSsimConfig,
) -> Result<(RateLoss, Vec<Tensor>)> {
    variable_rate_impl(x, recons, rates, cfg, true)
}

fn variable_rate_impl(
    x: &Tensor,
    recons: &[Tensor],
    rates: &RateSet,
    cfg: &MsSsimConfig,
    want_grad: bool,
) -> Result<(RateLoss, Vec<Tensor>)> {
    if recons.len() != rates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reconstructions for {} rates",
            recons.len(),
            rates.len()
        )));
    }
    let mut loss = RateLoss {
        total: 0.0,
        l2: Vec::with_capacity(recons.len()),
        ms_ssim: Vec::with_capacity(recons.len()),
    };
    let mut grads = Vec::new();
    for r in recons {
        if want_grad {
            let (l2, gl) = l2_loss_with_grad(x, r)?;
            let (ms, gm) = ms_ssim_with_grad(x, r, cfg)?;
            grads.push(gl.zip_map(&gm, "variable_rate_loss", |a, b| 2.0 * a - b)?);
            loss.l2.push(l2);
            loss.ms_ssim.push(ms);
        } else {
            loss.l2.push(l2_loss(x, r)?);
            loss.ms_ssim.push(ms_ssim(x, r, cfg)?);
        }
    }
    loss.total = 2.0 * loss.l2.iter().sum::<f64>() - loss.ms_ssim.iter().sum::<f64>();
    Ok((loss, grads))
}
