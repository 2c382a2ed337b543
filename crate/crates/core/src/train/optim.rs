use serde::{Deserialize, Serialize};

use super::config::OptimizerKind;
use crate::error::{contract, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer with per-tensor moment estimates and step counts,
/// so tensors that sit out some steps still get correct bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
    t: Vec<u64>,
}

/// Global L2 norm over the gradients that take part in a step.
pub fn global_norm(grads: &[Tensor<f64>], active: &[bool]) -> f64 {
    grads
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(g, _)| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[Vec<usize>]) -> Self {
        Self {
            kind,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: vec![0; shapes.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Updates every `params[i]` with `active[i]`, after scaling all active
    /// gradients so their global norm is at most `clip`. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut [&mut Tensor<f64>], grads: &[Tensor<f64>], active: &[bool], lr: f64, clip: f64) -> Result<f64> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || active.len() != n {
            return Err(contract("optimizer", "parameter, gradient and mask counts differ"));
        }
        let norm = global_norm(grads, active);
        let scale = if norm > clip { clip / norm } else { 1.0 };
        for i in 0..n {
            if !active[i] {
                continue;
            }
            if params[i].shape() != grads[i].shape() {
                return Err(contract("optimizer", format!("gradient {i} has the wrong shape")));
            }
            let p = params[i].data_mut();
            let g = grads[i].data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, &d) in p.iter_mut().zip(g) {
                        *x -= lr * scale * d;
                    }
                }
                OptimizerKind::Adam => {
                    self.t[i] += 1;
                    let t = self.t[i] as i32;
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for k in 0..p.len() {
                        let d = g[k] * scale;
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * d;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * d * d;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        p[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, &[vec![2]]);
        let mut p = Tensor::from_vec(vec![1.0, -1.0]);
        let g = Tensor::from_vec(vec![0.5, -3.0]);
        opt.step(&mut [&mut p], &[g], &[true], 0.1, 10.0).unwrap();
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_and_masks() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &[vec![1], vec![1]]);
        let mut a = Tensor::from_vec(vec![0.0]);
        let mut b = Tensor::from_vec(vec![0.0]);
        let grads = [Tensor::from_vec(vec![30.0]), Tensor::from_vec(vec![40.0])];
        let norm = opt.step(&mut [&mut a, &mut b], &grads, &[true, true], 1.0, 10.0).unwrap();
        assert_eq!(norm, 50.0);
        assert!((a.data()[0] + 6.0).abs() < 1e-12 && (b.data()[0] + 8.0).abs() < 1e-12);
        opt.step(&mut [&mut a, &mut b], &grads, &[false, true], 1.0, 100.0).unwrap();
        assert!((a.data()[0] + 6.0).abs() < 1e-12 && (b.data()[0] + 48.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, &[vec![3]]);
        let mut p = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        opt.step(&mut [&mut p], &[Tensor::from_vec(vec![1.0, 1.0, 1.0])], &[true], 0.0, 10.0).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 3.0]);
    }
}
