use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction. Moment buffers follow the parameter order of
/// the slice passed to `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[&Tensor]) -> Self {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    /// Applies one update using each parameter's accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || params.iter().zip(&self.m).any(|(p, m)| p.len() != m.len()) {
            return Err(Error::shape("adam", "parameter layout differs from optimizer state"));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = match p.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}
