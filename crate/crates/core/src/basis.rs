//! Reduced parameter bases: KLE (prior covariance) and ASM (active subspace
//! of the parameter-to-solution map), with their projection and
//! reconstruction operators.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::eigen::double_pass;
use crate::error::{Error, Result};
use crate::fem::{l2_norm, FeFunction};
use crate::field::WhittleMaternField;
use crate::linalg::{axpy, dot};
use crate::pde::{h_action, solve_forward, LinearizedSystem, NewtonConfig, PdeProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisMethod {
    Kle,
    Asm,
}

impl BasisMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BasisMethod::Kle => "kle",
            BasisMethod::Asm => "asm",
        }
    }
}

impl fmt::Display for BasisMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BasisMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kle" => Ok(BasisMethod::Kle),
            "asm" => Ok(BasisMethod::Asm),
            other => Err(Error::invalid(format!("unknown basis method `{other}`"))),
        }
    }
}

/// The inner product the basis is orthonormal in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisWeight {
    Mass,
    CovarianceInverse,
}

impl BasisMethod {
    pub fn weight(self) -> BasisWeight {
        match self {
            BasisMethod::Kle => BasisWeight::Mass,
            BasisMethod::Asm => BasisWeight::CovarianceInverse,
        }
    }
}

/// `r` W-orthonormal nodal vectors with their eigenvalues (descending).
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    method: BasisMethod,
    field: Arc<WhittleMaternField>,
    psi: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
}

impl ReducedBasis {
    /// Assembles a basis from stored vectors, e.g. when loading from disk.
    pub fn from_parts(
        method: BasisMethod,
        field: Arc<WhittleMaternField>,
        psi: Vec<Vec<f64>>,
        eigenvalues: Vec<f64>,
    ) -> Result<Self> {
        if psi.len() != eigenvalues.len() {
            return Err(Error::invalid("one eigenvalue per basis vector required"));
        }
        if psi.iter().any(|v| v.len() != field.ndofs()) {
            return Err(Error::invalid("basis vectors do not match the field's space"));
        }
        Ok(Self {
            method,
            field,
            psi,
            eigenvalues,
        })
    }

    pub fn method(&self) -> BasisMethod {
        self.method
    }

    pub fn weight(&self) -> BasisWeight {
        self.method.weight()
    }

    pub fn field(&self) -> &Arc<WhittleMaternField> {
        &self.field
    }

    pub fn rank(&self) -> usize {
        self.psi.len()
    }

    pub fn ndofs(&self) -> usize {
        self.field.ndofs()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.psi
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Leading `r` vectors of this basis.
    pub fn truncated(&self, r: usize) -> Result<Self> {
        if r == 0 || r > self.rank() {
            return Err(Error::invalid(format!("cannot truncate rank {} basis to {r}", self.rank())));
        }
        Ok(Self {
            method: self.method,
            field: self.field.clone(),
            psi: self.psi[..r].to_vec(),
            eigenvalues: self.eigenvalues[..r].to_vec(),
        })
    }

    /// `W v` for the basis weight.
    pub fn apply_weight(&self, v: &[f64]) -> Result<Vec<f64>> {
        match self.weight() {
            BasisWeight::Mass => {
                if v.len() != self.ndofs() {
                    return Err(Error::invalid("vector does not match the space"));
                }
                Ok(self.field.space().mass().mul_vec(v))
            }
            BasisWeight::CovarianceInverse => self.field.apply_c_inv(v),
        }
    }

    /// `Psi^T W m`.
    pub fn reduce(&self, m: &FeFunction) -> Result<Vec<f64>> {
        self.reduce_coeffs(m.coeffs())
    }

    pub fn reduce_coeffs(&self, m: &[f64]) -> Result<Vec<f64>> {
        let wm = self.apply_weight(m)?;
        Ok(self.psi.iter().map(|p| dot(p, &wm)).collect())
    }

    /// `Psi m_tilde`.
    pub fn expand(&self, m_tilde: &[f64]) -> Result<FeFunction> {
        if m_tilde.len() != self.rank() {
            return Err(Error::invalid(format!(
                "reduced vector has length {}, basis rank is {}",
                m_tilde.len(),
                self.rank()
            )));
        }
        let mut out = vec![0.0; self.ndofs()];
        for (c, p) in m_tilde.iter().zip(&self.psi) {
            axpy(*c, p, &mut out);
        }
        FeFunction::new(self.field.space().clone(), out)
    }

    /// `max |Psi^T W Psi - I|`.
    pub fn orthonormality_defect(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (i, pi) in self.psi.iter().enumerate() {
            let wpi = self.apply_weight(pi)?;
            for (j, pj) in self.psi.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(pj, &wpi) - want).abs());
            }
        }
        Ok(worst)
    }
}

/// Prior KLE: `M C M psi = lambda M psi`.
pub fn compute_kle_basis(field: Arc<WhittleMaternField>, r: usize, s: usize, seed: u64) -> Result<ReducedBasis> {
    let n = field.ndofs();
    let mass = field.space().mass();
    let f = field.as_ref();
    let apply_a = |v: &[f64]| {
        let x = f.solve_a(&mass.mul_vec(v));
        mass.mul_vec(&f.solve_a(&mass.mul_vec(&x)))
    };
    let apply_b = |v: &[f64]| mass.mul_vec(v);
    let apply_b_inv = |v: &[f64]| f.solve_mass(v);
    let eig = double_pass(apply_a, apply_b, apply_b_inv, n, r, s, seed)?;
    ReducedBasis::from_parts(BasisMethod::Kle, field, eig.eigenvectors, eig.eigenvalues)
}

/// Seed of the `i`-th parameter sample used to estimate the H operator.
/// Kept apart from the dataset seeds by a fixed offset of the stream.
pub fn asm_sample_seed(seed: u64, i: usize) -> u64 {
    (seed ^ 0xA5A5_5A5A_C3C3_3C3C).wrapping_add(i as u64)
}

/// Settings for [`compute_asm_basis`].
#[derive(Debug, Clone, Copy)]
pub struct AsmSettings {
    pub r: usize,
    pub s: usize,
    pub n_grad: usize,
    pub seed: u64,
    pub newton: NewtonConfig,
}

/// Draws parameter samples in seed order and linearizes the problem at
/// each. Draws whose forward solve fails are skipped with a warning, up to
/// `n_grad` extra attempts.
fn asm_samples(
    field: &WhittleMaternField,
    problem: &Arc<dyn PdeProblem>,
    settings: &AsmSettings,
) -> Result<Vec<LinearizedSystem>> {
    let mut samples = Vec::with_capacity(settings.n_grad);
    let mut next = 0;
    let limit = 2 * settings.n_grad;
    while samples.len() < settings.n_grad {
        let need = settings.n_grad - samples.len();
        if next + need > limit {
            return Err(Error::invalid(format!(
                "only {} of {} gradient samples could be solved",
                samples.len(),
                settings.n_grad
            )));
        }
        let batch: Vec<(usize, Result<LinearizedSystem>)> = (next..next + need)
            .into_par_iter()
            .map(|i| {
                let m = field.sample(asm_sample_seed(settings.seed, i));
                (i, LinearizedSystem::solve(problem.clone(), &m, &settings.newton).map(|(_, lin)| lin))
            })
            .collect();
        next += need;
        for (i, res) in batch {
            match res {
                Ok(lin) => samples.push(lin),
                Err(e) => log::warn!("gradient sample {i} skipped: {e}"),
            }
        }
    }
    Ok(samples)
}

/// Active subspace: `H psi = lambda C^-1 psi` with `H` the sample mean of
/// `(grad_m u)^* (grad_m u)` over `n_grad` prior draws.
pub fn compute_asm_basis(
    field: Arc<WhittleMaternField>,
    problem: Arc<dyn PdeProblem>,
    settings: &AsmSettings,
) -> Result<ReducedBasis> {
    if settings.n_grad == 0 {
        return Err(Error::invalid("n_grad must be positive"));
    }
    let samples = asm_samples(&field, &problem, settings)?;
    let f = field.as_ref();
    let apply_a = |v: &[f64]| h_action(&samples, v).expect("dimension checked by the solver");
    let apply_b = |v: &[f64]| f.apply_c_inv(v).expect("dimension checked by the solver");
    let apply_b_inv = |v: &[f64]| f.apply_c(v).expect("dimension checked by the solver");
    let eig = double_pass(apply_a, apply_b, apply_b_inv, f.ndofs(), settings.r, settings.s, settings.seed)?;
    ReducedBasis::from_parts(BasisMethod::Asm, field, eig.eigenvectors, eig.eigenvalues)
}

/// Mean relative L2 error `||u(P_r m) - u(m)|| / ||u(m)||` over `params`,
/// for each truncation rank in `ranks`. `params` pairs each parameter with
/// its solution.
pub fn reconstruction_error(
    basis: &ReducedBasis,
    problem: &dyn PdeProblem,
    newton: &NewtonConfig,
    params: &[(FeFunction, FeFunction)],
    ranks: &[usize],
) -> Result<Vec<f64>> {
    if params.is_empty() {
        return Err(Error::invalid("no samples given"));
    }
    let space = basis.field().space().clone();
    ranks
        .iter()
        .map(|&r| {
            let sub = basis.truncated(r)?;
            let errs: Vec<f64> = params
                .par_iter()
                .enumerate()
                .map(|(i, (m, u))| {
                    let mr = sub.expand(&sub.reduce(m)?)?;
                    let ur = solve_forward(problem, &mr, newton).map_err(|e| e.at_sample(i))?;
                    let diff: Vec<f64> = ur.u.coeffs().iter().zip(u.coeffs()).map(|(a, b)| a - b).collect();
                    Ok(l2_norm(&space, &diff) / u.l2_norm())
                })
                .collect::<Result<_>>()?;
            Ok(errs.iter().sum::<f64>() / errs.len() as f64)
        })
        .collect()
}
