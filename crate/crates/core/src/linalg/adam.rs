// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::math::sqrt;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    shape: (usize, usize),
}

impl AdamState {
    pub fn new(param: &Matrix) -> Self {
        Self {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
            shape: param.shape(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update at learning rate `lr` (which lets the
    /// caller apply warmup without touching `cfg`).
    pub fn step(&mut self, cfg: &AdamConfig, lr: f64, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        if param.shape() != self.shape || grad.shape() != self.shape {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: param.shape(),
                rhs: grad.shape(),
            });
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t);
        let step = lr / bc1;
        let sqrt_bc2 = sqrt(bc2);
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for ((p, g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (sqrt(*v) / sqrt_bc2 + cfg.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig::default();
        for _ in 0..5 {
            s.step(&cfg, cfg.lr, &mut p, &Matrix::zeros(2, 2)).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        let cfg = AdamConfig::default();
        for g in [0.3, -2.0, 1e-3] {
            let mut p = Matrix::zeros(1, 1);
            let mut s = AdamState::new(&p);
            s.step(&cfg, cfg.lr, &mut p, &Matrix::filled(1, 1, g)).unwrap();
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p.get(0, 0) - expected).abs() < 1e-15);
            assert!((p.get(0, 0).abs() - cfg.lr).abs() < 1e-7);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut p = Matrix::from_rows(&[[0.1, 0.2, 0.3]]);
            let mut s = AdamState::new(&p);
            for i in 0..10 {
                let g = Matrix::from_rows(&[[libm::sin(f64::from(i)), 0.5, -0.25 * f64::from(i)]]);
                s.step(&cfg, cfg.lr, &mut p, &g).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut s = AdamState::new(&p);
        let e = s.step(&AdamConfig::default(), 1e-3, &mut p, &Matrix::zeros(2, 3));
        assert!(matches!(e, Err(Error::Shape { .. })));
    }
}
