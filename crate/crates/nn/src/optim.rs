//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    /// Zero moments for parameters of the given shapes.
    pub fn new(config: AdamWConfig, params: &[Matrix]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.nrows(), p.ncols())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Restores a saved state.
    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Matrix>, v: Vec<Matrix>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("first and second moments differ in shape".into()));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Matrix] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.v
    }

    /// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)`.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::Shape(format!("tensor of shape {:?} does not match state", p.shape())));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p[k]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_sign_like() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = vec![Matrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5])];
        let g = vec![Matrix::from_row_slice(1, 3, &[0.3, -4.0, 1e-3])];
        let before = p[0].clone();
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &g).unwrap();
        for k in 0..3 {
            let want = before[k] - cfg.lr * g[0][k] / (g[0][k].abs() + cfg.eps);
            assert!((p[0][k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_only() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut p = vec![Matrix::from_row_slice(1, 2, &[2.0, -1.0])];
        let g = vec![Matrix::zeros(1, 2)];
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &g).unwrap();
        assert!((p[0][0] - 2.0 * (1.0 - cfg.lr * 0.1)).abs() < 1e-15);
        assert!((p[0][1] + 1.0 * (1.0 - cfg.lr * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_norm_decreases_after_second_step() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = vec![Matrix::from_row_slice(2, 2, &[1.0, -0.5, 0.25, 2.0])];
        let mut opt = AdamW::new(cfg, &p);
        let mut norms = vec![p[0].norm()];
        for _ in 0..100 {
            let g = vec![p[0].clone()];
            opt.step(&mut p, &g).unwrap();
            norms.push(p[0].norm());
        }
        for w in norms[2..].windows(2) {
            assert!(w[1] < w[0], "{norms:?}");
        }
        assert!(norms[100] < norms[0] - 50.0 * cfg.lr);
    }

    #[test]
    fn shape_mismatch() {
        let p = vec![Matrix::zeros(2, 2)];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mut wrong = vec![Matrix::zeros(2, 3)];
        assert!(opt.step(&mut wrong, &[Matrix::zeros(2, 3)]).is_err());
    }
}
