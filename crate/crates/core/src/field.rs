//! Whittle-Matérn Gaussian random fields `N(mean, (delta I - gamma Δ)^-2)`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fem::{assemble_shifted_stiffness, FeFunction, FunctionSpace};
use crate::linalg::{Cholesky, CsrMatrix};

/// Discrete Gaussian measure with covariance `C = A^-1 M A^-1`,
/// `A = delta M + gamma K`.
#[derive(Debug)]
pub struct WhittleMaternField {
    space: Arc<FunctionSpace>,
    delta: f64,
    gamma: f64,
    mean: Vec<f64>,
    a: CsrMatrix,
    a_factor: Cholesky,
    m_factor: Cholesky,
}

impl WhittleMaternField {
    pub fn new(mean: FeFunction, delta: f64, gamma: f64) -> Result<Self> {
        let space = mean.space().clone();
        let a = assemble_shifted_stiffness(&space, delta, gamma)?;
        let a_factor = Cholesky::factor(&a)?;
        let m_factor = Cholesky::factor(space.mass())?;
        Ok(Self {
            space,
            delta,
            gamma,
            mean: mean.into_coeffs(),
            a,
            a_factor,
            m_factor,
        })
    }

    /// Field with a constant mean function.
    pub fn with_constant_mean(space: Arc<FunctionSpace>, mean: f64, delta: f64, gamma: f64) -> Result<Self> {
        Self::new(FeFunction::interpolate(space, |_| mean), delta, gamma)
    }

    pub fn space(&self) -> &Arc<FunctionSpace> {
        &self.space
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn a_matrix(&self) -> &CsrMatrix {
        &self.a
    }

    pub fn ndofs(&self) -> usize {
        self.mean.len()
    }

    /// White noise vector for `seed`; one independent stream per seed.
    pub fn noise(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.ndofs()).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn sample(&self, seed: u64) -> FeFunction {
        self.sample_from_noise(&self.noise(seed))
            .expect("noise length matches the space")
    }

    /// `mean + A^-1 L_M z`.
    pub fn sample_from_noise(&self, z: &[f64]) -> Result<FeFunction> {
        self.check_len(z)?;
        let lz = self.m_factor.apply_sqrt(z);
        let x = self.a_factor.solve(&lz);
        let coeffs = self.mean.iter().zip(&x).map(|(m, d)| m + d).collect();
        FeFunction::new(self.space.clone(), coeffs)
    }

    /// `C^-1 v = A M^-1 A v`.
    pub fn apply_c_inv(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        let av = self.a.mul_vec(v);
        Ok(self.a.mul_vec(&self.m_factor.solve(&av)))
    }

    /// `C v = A^-1 M A^-1 v`.
    pub fn apply_c(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        let x = self.a_factor.solve(v);
        Ok(self.a_factor.solve(&self.space.mass().mul_vec(&x)))
    }

    pub fn solve_a(&self, v: &[f64]) -> Vec<f64> {
        self.a_factor.solve(v)
    }

    pub fn solve_mass(&self, v: &[f64]) -> Vec<f64> {
        self.m_factor.solve(v)
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.ndofs() {
            return Err(Error::invalid(format!(
                "vector of length {} does not match {} dofs",
                v.len(),
                self.ndofs()
            )));
        }
        Ok(())
    }
}
