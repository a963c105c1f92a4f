//! Procedural test images with natural-image-like statistics: smooth colour
//! gradients, multi-octave value noise for texture, and solid ellipses for
//! object edges. Used by tests and for smoke-testing training without a
//! dataset on disk.

use rand::Rng;

use crate::seed;
use crate::tensor::Tensor;

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated random lattice with spacing `cell`, in [-1, 1].
fn value_noise(rng: &mut impl Rng, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let g = |a: usize, b: usize| grid[(iy + a) * gw + ix + b];
            let top = g(0, 0) * (1.0 - tx) + g(0, 1) * tx;
            let bottom = g(1, 0) * (1.0 - tx) + g(1, 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// A `(1, 3, h, w)` image of integer pixel values in `[0, 255]`.
pub fn image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = seed::rng(seed, &[0x5e_ed]);
    let mut img = Tensor::zeros([1, 3, h, w]);

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(30.0..220.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(30.0..220.0));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());

    let mut texture = vec![0.0; h * w];
    let mut amplitude = 28.0;
    let mut cell = (h.max(w) as f64 / 3.0).max(4.0);
    while cell >= 2.0 {
        for (t, n) in texture.iter_mut().zip(value_noise(&mut rng, h, w, cell)) {
            *t += amplitude * n;
        }
        amplitude *= 0.55;
        cell /= 2.0;
    }
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.3));

    for y in 0..h {
        for x in 0..w {
            let u = ((x as f64 / w.max(1) as f64 - 0.5) * dx + (y as f64 / h.max(1) as f64 - 0.5) * dy + 0.5)
                .clamp(0.0, 1.0);
            for c in 0..3 {
                img.plane_mut(0, c)[y * w + x] = c0[c] * (1.0 - u) + c1[c] * u + tint[c] * texture[y * w + x];
            }
        }
    }

    let shapes = rng.random_range(3..8);
    for _ in 0..shapes {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(0.08..0.35) * h as f64 + 1.0;
        let rx = rng.random_range(0.08..0.35) * w as f64 + 1.0;
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
        let shade = rng.random_range(-0.4..0.4);
        for y in 0..h {
            for x in 0..w {
                let (ny, nx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                if ny * ny + nx * nx <= 1.0 {
                    let light = 1.0 + shade * ny;
                    for c in 0..3 {
                        let i = y * w + x;
                        let tex = 0.5 * tint[c] * texture[i];
                        img.plane_mut(0, c)[i] = colour[c] * light + tex;
                    }
                }
            }
        }
    }
    img.map(|v| v.round().clamp(0.0, 255.0))
}
