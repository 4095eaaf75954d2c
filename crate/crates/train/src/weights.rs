//! Self-adaptive loss weights balancing the gradient magnitudes of the two
//! loss terms.

use serde::{Deserialize, Serialize};

pub const GRAD_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        Self { lambda1, lambda2 }
    }

    /// Targets `(g1 + g2) / g_i`, blended in with factor `1 - ema`.
    /// Returns whether the weights changed.
    pub fn update(&mut self, g1: f64, g2: f64, ema: f64) -> bool {
        if g1 < GRAD_NORM_FLOOR && g2 < GRAD_NORM_FLOOR {
            return false;
        }
        if !g1.is_finite() || !g2.is_finite() {
            return false;
        }
        let (g1, g2) = (g1.max(GRAD_NORM_FLOOR), g2.max(GRAD_NORM_FLOOR));
        let (t1, t2) = target(g1, g2);
        self.lambda1 = ema * self.lambda1 + (1.0 - ema) * t1;
        self.lambda2 = ema * self.lambda2 + (1.0 - ema) * t2;
        true
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::new(1.0, 1.0)
    }
}

fn target(g1: f64, g2: f64) -> (f64, f64) {
    let s = g1 + g2;
    (s / g1, s / g2)
}
