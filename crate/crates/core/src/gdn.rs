//! Generalized divisive normalization (GDN), its decoder-side counterpart
//! (IGDN), and the residual blocks built from them.
//!
//! ```text
//! GDN:   w_i = v_i / sqrt(beta_i + sum_j gamma_ij v_j^2)
//! IGDN:  v_i = w_i * sqrt(beta_i + sum_j gamma_ij w_j^2)
//! ```
//!
//! Both act on each spatial location independently, mixing only channels.
//! IGDN is not the algebraic inverse of GDN unless gamma is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::gemm::{gemm, Mat};
use crate::tensor::{conv_backward, conv_forward, ops, ConvGrads, ConvKernel, ConvMode, Tensor};

/// Lower bound kept on every beta after projection.
pub const BETA_FLOOR: f64 = 1e-6;

/// Per-layer normalization parameters: beta `(1, C, 1, 1)`, gamma `(1, 1, C, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GdnParams {
    pub beta: Tensor,
    pub gamma: Tensor,
    pub epsilon_floor: f64,
}

impl GdnParams {
    /// beta = 1, gamma = 0.1 * I.
    pub fn new(channels: usize) -> Self {
        let mut gamma = vec![0.0; channels * channels];
        for i in 0..channels {
            gamma[i * channels + i] = 0.1;
        }
        Self::from_parts(vec![1.0; channels], gamma).expect("default GDN parameters are valid")
    }

    /// beta = 1, gamma = 0: GDN and IGDN both reduce to the identity.
    pub fn identity(channels: usize) -> Self {
        Self::from_parts(vec![1.0; channels], vec![0.0; channels * channels])
            .expect("identity GDN parameters are valid")
    }

    pub fn from_parts(beta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        let c = beta.len();
        if gamma.len() != c * c {
            return Err(Error::shape(
                "gdn params",
                format!("gamma has {} entries for {} channels", gamma.len(), c),
            ));
        }
        let params = GdnParams {
            beta: Tensor::vector(beta),
            gamma: Tensor::from_vec([1, 1, c, c], gamma)?,
            epsilon_floor: BETA_FLOOR,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((i, b)) = self
            .beta
            .data()
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b >= self.epsilon_floor) || !b.is_finite())
        {
            return Err(Error::Constraint(format!(
                "beta[{i}] = {b} is below the floor {}",
                self.epsilon_floor
            )));
        }
        if let Some((i, g)) = self
            .gamma
            .data()
            .iter()
            .enumerate()
            .find(|(_, &g)| !(g >= 0.0) || !g.is_finite())
        {
            return Err(Error::Constraint(format!("gamma[{i}] = {g} is negative")));
        }
        Ok(())
    }

    /// Clamp parameters back into the feasible set after an optimizer step.
    pub fn project(&mut self) {
        let floor = self.epsilon_floor;
        self.beta.data_mut().iter_mut().for_each(|b| *b = b.max(floor));
        self.gamma.data_mut().iter_mut().for_each(|g| *g = g.max(0.0));
    }

    pub fn accumulate(&mut self, grads: &GdnGrads) -> Result<()> {
        self.beta.accumulate_grad(grads.beta.data())?;
        self.gamma.accumulate_grad(grads.gamma.data())
    }

    pub fn param_count(&self) -> usize {
        self.beta.len() + self.gamma.len()
    }
}

#[derive(Clone, Debug)]
pub struct GdnGrads {
    pub input: Tensor,
    pub beta: Tensor,
    pub gamma: Tensor,
}

fn check(x: &Tensor, p: &GdnParams, op: &'static str) -> Result<()> {
    if x.channels() != p.channels() {
        return Err(Error::shape(
            op,
            format!("input has {} channels, parameters cover {}", x.channels(), p.channels()),
        ));
    }
    p.validate()
}

/// Per-item squared inputs and sqrt(beta + gamma * x^2) as (C x P) matrices.
fn root_terms(item: &[f64], p: &GdnParams, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let c = p.channels();
    let squares: Vec<f64> = item.iter().map(|v| v * v).collect();
    let mut roots = vec![0.0; c * plane];
    gemm(
        Mat::new(p.gamma.data(), c, c),
        Mat::new(&squares, c, plane),
        0.0,
        &mut roots,
    );
    for (i, b) in p.beta.data().iter().enumerate() {
        roots[i * plane..(i + 1) * plane]
            .iter_mut()
            .for_each(|r| *r = (*r + b).sqrt());
    }
    (squares, roots)
}

fn normalize(x: &Tensor, p: &GdnParams, inverse: bool) -> Tensor {
    let plane = x.plane_len();
    let mut out = Tensor::zeros(x.shape());
    for n in 0..x.batch() {
        let item = x.item(n);
        let (_, roots) = root_terms(item, p, plane);
        for ((o, v), r) in out.item_mut(n).iter_mut().zip(item).zip(&roots) {
            *o = if inverse { v * r } else { v / r };
        }
    }
    out
}

fn normalize_backward(grad: &Tensor, x: &Tensor, p: &GdnParams, inverse: bool) -> GdnGrads {
    let c = p.channels();
    let plane = x.plane_len();
    let mut input = Tensor::zeros(x.shape());
    let mut beta = vec![0.0; c];
    let mut gamma = vec![0.0; c * c];
    let mut mixed = vec![0.0; c * plane];
    for n in 0..x.batch() {
        let item = x.item(n);
        let g = grad.item(n);
        let (squares, roots) = root_terms(item, p, plane);
        // a_i = d(loss)/d(radicand_i)
        let a: Vec<f64> = g
            .iter()
            .zip(item)
            .zip(&roots)
            .map(|((g, v), r)| {
                if inverse {
                    g * v / (2.0 * r)
                } else {
                    -g * v / (2.0 * r * r * r)
                }
            })
            .collect();
        for i in 0..c {
            beta[i] += a[i * plane..(i + 1) * plane].iter().sum::<f64>();
        }
        gemm(
            Mat::new(&a, c, plane),
            Mat::new(&squares, c, plane).t(),
            1.0,
            &mut gamma,
        );
        gemm(
            Mat::new(p.gamma.data(), c, c).t(),
            Mat::new(&a, c, plane),
            0.0,
            &mut mixed,
        );
        for ((((dst, g), v), r), m) in input.item_mut(n).iter_mut().zip(g).zip(item).zip(&roots).zip(&mixed) {
            let direct = if inverse { g * r } else { g / r };
            *dst = direct + 2.0 * v * m;
        }
    }
    GdnGrads {
        input,
        beta: Tensor::vector(beta),
        gamma: Tensor::from_vec([1, 1, c, c], gamma).expect("gamma gradient shape"),
    }
}

pub fn gdn_forward(v: &Tensor, p: &GdnParams) -> Result<Tensor> {
    check(v, p, "gdn_forward")?;
    Ok(normalize(v, p, false))
}

pub fn gdn_backward(output_grad: &Tensor, saved_v: &Tensor, p: &GdnParams) -> Result<GdnGrads> {
    check(saved_v, p, "gdn_backward")?;
    saved_v.ensure_same_shape(output_grad, "gdn_backward")?;
    Ok(normalize_backward(output_grad, saved_v, p, false))
}

pub fn igdn_forward(w: &Tensor, p: &GdnParams) -> Result<Tensor> {
    check(w, p, "igdn_forward")?;
    Ok(normalize(w, p, true))
}

pub fn igdn_backward(output_grad: &Tensor, saved_w: &Tensor, p: &GdnParams) -> Result<GdnGrads> {
    check(saved_w, p, "igdn_backward")?;
    saved_w.ensure_same_shape(output_grad, "igdn_backward")?;
    Ok(normalize_backward(output_grad, saved_w, p, true))
}

/// Which residual transform a block implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockVariant {
    /// (conv -> GDN) x 2, plus shortcut.
    ResGdn,
    /// (IGDN -> conv) x 2, plus shortcut.
    ResIgdn,
    /// (conv -> ReLU) x 2, plus shortcut.
    ResRelu,
}

/// Two affine convolutions of width n with their normalizations.
/// `norms` is `None` for the ReLU variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlockParams {
    pub variant: BlockVariant,
    pub convs: [ConvKernel; 2],
    pub norms: [Option<GdnParams>; 2],
}

#[derive(Clone, Copy)]
enum Step {
    Conv(usize),
    Norm(usize, bool),
    Relu,
}

impl ResBlockParams {
    pub fn new(variant: BlockVariant, convs: [ConvKernel; 2], norms: [Option<GdnParams>; 2]) -> Result<Self> {
        let width = convs[0].in_channels();
        for conv in &convs {
            if conv.mode != ConvMode::Affine {
                return Err(Error::InvalidArgument(
                    "residual block convolutions must be affine".into(),
                ));
            }
            if conv.in_channels() != width || conv.out_channels() != width {
                return Err(Error::shape(
                    "res block",
                    format!(
                        "conv {}->{} in a block of width {width}",
                        conv.in_channels(),
                        conv.out_channels()
                    ),
                ));
            }
        }
        for norm in &norms {
            match (variant, norm) {
                (BlockVariant::ResRelu, None) => {}
                (BlockVariant::ResRelu, Some(_)) => {
                    return Err(Error::InvalidArgument("ReLU block carries no GDN parameters".into()))
                }
                (_, None) => return Err(Error::InvalidArgument("GDN block is missing parameters".into())),
                (_, Some(p)) if p.channels() != width => {
                    return Err(Error::shape(
                        "res block",
                        format!("GDN over {} channels in a block of width {width}", p.channels()),
                    ))
                }
                _ => {}
            }
        }
        Ok(ResBlockParams { variant, convs, norms })
    }

    pub fn width(&self) -> usize {
        self.convs[0].in_channels()
    }

    fn steps(&self) -> [Step; 4] {
        match self.variant {
            BlockVariant::ResGdn => [Step::Conv(0), Step::Norm(0, false), Step::Conv(1), Step::Norm(1, false)],
            BlockVariant::ResRelu => [Step::Conv(0), Step::Relu, Step::Conv(1), Step::Relu],
            BlockVariant::ResIgdn => [Step::Norm(0, true), Step::Conv(0), Step::Norm(1, true), Step::Conv(1)],
        }
    }

    fn norm(&self, i: usize) -> &GdnParams {
        self.norms[i].as_ref().expect("validated at construction")
    }

    pub fn accumulate(&mut self, grads: &ResBlockGrads) -> Result<()> {
        for (conv, g) in self.convs.iter_mut().zip(&grads.convs) {
            conv.weight.accumulate_grad(g.weight.data())?;
            conv.bias.accumulate_grad(g.bias.data())?;
        }
        for (norm, g) in self.norms.iter_mut().zip(&grads.norms) {
            if let (Some(p), Some(g)) = (norm, g) {
                p.accumulate(g)?;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvKernel::param_count).sum::<usize>()
            + self.norms.iter().flatten().map(GdnParams::param_count).sum::<usize>()
    }
}

/// Inputs to each of the four inner steps, saved for backward.
#[derive(Clone, Debug)]
pub struct ResBlockTape {
    inputs: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ResBlockGrads {
    pub convs: Vec<ConvGrads>,
    pub norms: Vec<Option<GdnGrads>>,
}

fn check_block_input(u: &Tensor, p: &ResBlockParams) -> Result<()> {
    if u.channels() != p.width() {
        return Err(Error::shape(
            "res_block_forward",
            format!("input has {} channels, block width is {}", u.channels(), p.width()),
        ));
    }
    Ok(())
}

/// `T(u) + u`.
pub fn res_block_forward(u: &Tensor, p: &ResBlockParams) -> Result<Tensor> {
    Ok(res_block_forward_taped(u, p)?.0)
}

pub fn res_block_forward_taped(u: &Tensor, p: &ResBlockParams) -> Result<(Tensor, ResBlockTape)> {
    check_block_input(u, p)?;
    let mut inputs = Vec::with_capacity(4);
    let mut x = u.clone();
    for step in p.steps() {
        let y = match step {
            Step::Conv(i) => conv_forward(&x, &p.convs[i])?,
            Step::Norm(i, false) => gdn_forward(&x, p.norm(i))?,
            Step::Norm(i, true) => igdn_forward(&x, p.norm(i))?,
            Step::Relu => ops::relu(&x),
        };
        inputs.push(x);
        x = y;
    }
    let out = ops::add(&x, u)?;
    Ok((out, ResBlockTape { inputs }))
}

pub fn res_block_backward(
    output_grad: &Tensor,
    tape: &ResBlockTape,
    p: &ResBlockParams,
) -> Result<(Tensor, ResBlockGrads)> {
    let mut conv_grads: [Option<ConvGrads>; 2] = [None, None];
    let mut norm_grads: [Option<GdnGrads>; 2] = [None, None];
    let mut g = output_grad.clone();
    for (step, x) in p.steps().iter().zip(&tape.inputs).rev() {
        g = match *step {
            Step::Conv(i) => {
                let grads = conv_backward(&g, x, &p.convs[i])?;
                let input = grads.input.clone();
                conv_grads[i] = Some(grads);
                input
            }
            Step::Norm(i, inverse) => {
                let grads = if inverse {
                    igdn_backward(&g, x, p.norm(i))?
                } else {
                    gdn_backward(&g, x, p.norm(i))?
                };
                let input = grads.input.clone();
                norm_grads[i] = Some(grads);
                input
            }
            Step::Relu => ops::relu_backward(&g, x)?,
        };
    }
    let input_grad = ops::add(&g, output_grad)?;
    let [c0, c1] = conv_grads;
    Ok((
        input_grad,
        ResBlockGrads {
            convs: vec![c0.expect("conv 0 visited"), c1.expect("conv 1 visited")],
            norms: norm_grads.into_iter().collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pixel(values: &[f64]) -> Tensor {
        Tensor::from_vec([1, values.len(), 1, 1], values.to_vec()).unwrap()
    }

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_configuration_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random([2, 3, 4, 4], &mut rng);
        let p = GdnParams::identity(3);
        assert_eq!(gdn_forward(&v, &p).unwrap(), v);
        assert_eq!(igdn_forward(&v, &p).unwrap(), v);
        let g = random([2, 3, 4, 4], &mut rng);
        assert_eq!(gdn_backward(&g, &v, &p).unwrap().input, g);
    }

    #[test]
    fn hand_evaluated_pixels() {
        let p = GdnParams::from_parts(vec![1.0, 1.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = gdn_forward(&pixel(&[3.0, 4.0]), &p).unwrap();
        assert!((w.data()[0] - 3.0 / 10f64.sqrt()).abs() < 1e-15);
        assert!((w.data()[1] - 4.0 / 17f64.sqrt()).abs() < 1e-15);

        let p1 = GdnParams::from_parts(vec![1.0], vec![1.0]).unwrap();
        let v = igdn_forward(&pixel(&[2.0]), &p1).unwrap();
        assert!((v.data()[0] - 2.0 * 5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_in_zero_out() {
        let p = GdnParams::new(4);
        let z = Tensor::zeros([1, 4, 3, 3]);
        assert!(gdn_forward(&z, &p).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(igdn_forward(&z, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random([1, 2, 1, 1], &mut rng);
        let g = gdn_backward(&Tensor::zeros([1, 2, 1, 1]), &v, &GdnParams::new(2)).unwrap();
        assert!(g
            .input
            .data()
            .iter()
            .chain(g.beta.data())
            .chain(g.gamma.data())
            .all(|&x| x == 0.0));
    }

    #[test]
    fn constraint_violations_rejected() {
        assert!(GdnParams::from_parts(vec![0.0], vec![0.0]).is_err());
        assert!(GdnParams::from_parts(vec![1.0], vec![-0.1]).is_err());
        let mut p = GdnParams::new(2);
        p.beta.data_mut()[0] = -1.0;
        assert!(matches!(
            gdn_forward(&Tensor::zeros([1, 2, 1, 1]), &p),
            Err(Error::Constraint(_))
        ));
        p.gamma.data_mut()[1] = -5.0;
        p.project();
        assert!(p.validate().is_ok());
        assert_eq!(p.beta.data()[0], BETA_FLOOR);
        assert_eq!(p.gamma.data()[1], 0.0);
        assert!(gdn_forward(&Tensor::zeros([1, 3, 1, 1]), &p).is_err());
    }

    #[test]
    fn matches_elementwise_composition() {
        // radicand = beta + gamma . v^2 built from the elementwise suite
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = random([1, 3, 2, 2], &mut rng);
        let mut p = GdnParams::new(3);
        for g in p.gamma.data_mut() {
            *g = rng.random_range(0.0..0.5);
        }
        let sq = ops::square(&v);
        let mut radicand = Tensor::zeros(v.shape());
        for i in 0..3 {
            let mut acc = Tensor::filled([1, 1, 2, 2], p.beta.data()[i]);
            for j in 0..3 {
                let plane = Tensor::from_vec([1, 1, 2, 2], sq.plane(0, j).to_vec()).unwrap();
                acc = ops::add(&acc, &ops::scale(&plane, p.gamma.data()[i * 3 + j])).unwrap();
            }
            radicand.plane_mut(0, i).copy_from_slice(acc.data());
        }
        let root = ops::sqrt(&radicand).unwrap();
        let expect_gdn = v.zip_map(&root, "div", |a, b| a / b).unwrap();
        let expect_igdn = ops::mul(&v, &root).unwrap();
        for (a, b) in gdn_forward(&v, &p).unwrap().data().iter().zip(expect_gdn.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in igdn_forward(&v, &p).unwrap().data().iter().zip(expect_igdn.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn block(variant: BlockVariant, width: usize, rng: &mut ChaCha8Rng, zero: bool) -> ResBlockParams {
        let conv = |rng: &mut ChaCha8Rng| {
            let mut k = ConvKernel::zeros(width, width, 3, ConvMode::Affine).unwrap();
            if !zero {
                k.weight
                    .data_mut()
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-0.3..0.3));
                k.bias
                    .data_mut()
                    .iter_mut()
                    .for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
            k
        };
        let norms = match variant {
            BlockVariant::ResRelu => [None, None],
            _ => [Some(GdnParams::new(width)), Some(GdnParams::new(width))],
        };
        ResBlockParams::new(variant, [conv(rng), conv(rng)], norms).unwrap()
    }

    #[test]
    fn zero_transform_is_pure_shortcut() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for variant in [BlockVariant::ResGdn, BlockVariant::ResIgdn, BlockVariant::ResRelu] {
            let p = block(variant, 3, &mut rng, true);
            let u = random([2, 3, 5, 5], &mut rng);
            assert_eq!(res_block_forward(&u, &p).unwrap(), u);
        }
    }

    #[test]
    fn block_output_minus_input_is_composed_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = random([1, 2, 4, 4], &mut rng);
        let p = block(BlockVariant::ResGdn, 2, &mut rng, false);
        let t = gdn_forward(
            &conv_forward(
                &gdn_forward(&conv_forward(&u, &p.convs[0]).unwrap(), p.norms[0].as_ref().unwrap()).unwrap(),
                &p.convs[1],
            )
            .unwrap(),
            p.norms[1].as_ref().unwrap(),
        )
        .unwrap();
        let out = res_block_forward(&u, &p).unwrap();
        for ((o, i), t) in out.data().iter().zip(u.data()).zip(t.data()) {
            assert!((o - i - t).abs() < 1e-14);
        }

        let q = block(BlockVariant::ResIgdn, 2, &mut rng, false);
        let t = conv_forward(
            &igdn_forward(
                &conv_forward(&igdn_forward(&u, q.norms[0].as_ref().unwrap()).unwrap(), &q.convs[0]).unwrap(),
                q.norms[1].as_ref().unwrap(),
            )
            .unwrap(),
            &q.convs[1],
        )
        .unwrap();
        let out = res_block_forward(&u, &q).unwrap();
        for ((o, i), t) in out.data().iter().zip(u.data()).zip(t.data()) {
            assert!((o - i - t).abs() < 1e-14);
        }
    }

    #[test]
    fn block_rejects_bad_wiring() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = block(BlockVariant::ResGdn, 2, &mut rng, false);
        assert!(res_block_forward(&Tensor::zeros([1, 3, 4, 4]), &p).is_err());
        let k = ConvKernel::zeros(2, 2, 3, ConvMode::Affine).unwrap();
        assert!(ResBlockParams::new(
            BlockVariant::ResRelu,
            [k.clone(), k.clone()],
            [Some(GdnParams::new(2)), None]
        )
        .is_err());
        let down = ConvKernel::zeros(2, 2, 4, ConvMode::Down).unwrap();
        assert!(ResBlockParams::new(BlockVariant::ResRelu, [k, down], [None, None]).is_err());
    }

    #[test]
    fn output_bounded_by_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let v = random([1, 3, 3, 3], &mut rng);
            let mut p = GdnParams::new(3);
            for b in p.beta.data_mut() {
                *b = rng.random_range(0.01..2.0);
            }
            for g in p.gamma.data_mut() {
                *g = rng.random_range(0.0..1.0);
            }
            let w = gdn_forward(&v, &p).unwrap();
            for c in 0..3 {
                let bound = 1.0 / p.beta.data()[c].sqrt();
                for (a, b) in w.plane(0, c).iter().zip(v.plane(0, c)) {
                    assert!(a.abs() <= b.abs() * bound + 1e-15);
                }
            }
        }
    }
}
