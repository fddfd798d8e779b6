//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&s| Matrix::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Matrix::zeros(s)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != self.m[k].dim() || g.dim() != self.m[k].dim() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.dim(),
                    rhs: g.dim(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(&mut **p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= lr * (update + weight_decay * *p);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut x = array![[1.5, -2.0]];
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0), &[(1, 2)]);
        for _ in 0..5 {
            opt.step(&mut [&mut x], &[Matrix::zeros((1, 2))]).unwrap();
        }
        assert_eq!(x, array![[1.5, -2.0]]);
    }

    #[test]
    fn first_step_on_square() {
        let mut x = array![[1.0]];
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0), &[(1, 1)]);
        let g = 2.0 * &x;
        opt.step(&mut [&mut x], &[g]).unwrap();
        assert!((x[[0, 0]] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimises_a_quadratic_and_is_deterministic() {
        let run = || {
            let mut x = array![[3.0, -4.0]];
            let mut opt = Adam::new(AdamConfig::new(0.05, 0.0), &[(1, 2)]);
            let mut trace = Vec::new();
            for _ in 0..2000 {
                let g = 2.0 * &x;
                opt.step(&mut [&mut x], &[g]).unwrap();
                trace.push(x.clone());
            }
            trace
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.last().unwrap().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut x = array![[1.0]];
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.5), &[(1, 1)]);
        opt.step(&mut [&mut x], &[Matrix::zeros((1, 1))]).unwrap();
        assert!((x[[0, 0]] - 0.95).abs() < 1e-12);
        assert!(opt.step(&mut [&mut x], &[]).is_err());
    }
}
