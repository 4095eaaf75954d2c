//! Benchmark PDEs, Newton forward solves, and the linearized / adjoint
//! solves behind derivative labels and Gauss-Newton operator actions.
//!
//! All forms are tested against the nodal basis: a "residual" here is the
//! vector `<R(m, u), phi_i>` over every basis function `phi_i`, before
//! Dirichlet rows are eliminated.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{interp_at, FeFunction, FunctionSpace, Point, QUAD_POINTS};
use crate::linalg::{norm2, CsrMatrix, Lu};

/// A steady PDE `R(m, u) = 0` with homogeneous Dirichlet data on
/// [`PdeProblem::dirichlet_nodes`].
pub trait PdeProblem: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// `<R(m, u), phi_i>` for all `i`.
    fn residual(&self, space: &FunctionSpace, m: &[f64], u: &[f64]) -> Vec<f64>;

    /// Matrix with entries `<(d_u R) phi_j, phi_i>`.
    fn jacobian_u(&self, space: &FunctionSpace, m: &[f64], u: &[f64]) -> CsrMatrix;

    /// `<(d_m R) psi, phi_i>` for all `i`.
    fn dm_action(&self, space: &FunctionSpace, m: &[f64], u: &[f64], psi: &[f64]) -> Vec<f64>;

    /// `<q, (d_m R) phi_i>` for all `i`.
    fn dm_transpose_action(&self, space: &FunctionSpace, m: &[f64], u: &[f64], q: &[f64]) -> Vec<f64>;

    /// `<(d_u R) p, phi_i>` for all `i`.
    fn du_action(&self, space: &FunctionSpace, m: &[f64], u: &[f64], p: &[f64]) -> Vec<f64> {
        self.jacobian_u(space, m, u).mul_vec(p)
    }

    fn dirichlet_nodes(&self, space: &FunctionSpace) -> Vec<usize> {
        space.mesh().boundary_nodes()
    }
}

/// Pointwise reaction term `g(u, x)` and its derivative in `u`.
trait Reaction {
    fn eval(&self, u: f64, x: Point) -> (f64, f64);
}

/// Weak forms of `-div(e^m grad u) + g(u, x)`, integrated with the
/// three-point rule.
fn diffusion_residual<G: Reaction>(g: &G, space: &FunctionSpace, m: &[f64], u: &[f64]) -> Vec<f64> {
    let mesh = space.mesh();
    space.assemble_vector(|c, geo| {
        let ml = space.local_values(c, m);
        let ul = space.local_values(c, u);
        let du = geo.grad_of(ul);
        let x = mesh.cells()[c].map(|v| mesh.nodes()[v]);
        let w = geo.area / 3.0;
        let mut fe = [0.0; 3];
        for q in QUAD_POINTS {
            let kappa = interp_at(ml, q).exp();
            let uq = interp_at(ul, q);
            let xq = [interp_at(x.map(|p| p[0]), q), interp_at(x.map(|p| p[1]), q)];
            let (gv, _) = g.eval(uq, xq);
            for a in 0..3 {
                let flux = du[0] * geo.grads[a][0] + du[1] * geo.grads[a][1];
                fe[a] += w * (kappa * flux + gv * q[a]);
            }
        }
        fe
    })
}

fn diffusion_jacobian<G: Reaction>(g: &G, space: &FunctionSpace, m: &[f64], u: &[f64]) -> CsrMatrix {
    let mesh = space.mesh();
    space.assemble_matrix(|c, geo| {
        let ml = space.local_values(c, m);
        let ul = space.local_values(c, u);
        let x = mesh.cells()[c].map(|v| mesh.nodes()[v]);
        let w = geo.area / 3.0;
        let mut ke = [[0.0; 3]; 3];
        for q in QUAD_POINTS {
            let kappa = interp_at(ml, q).exp();
            let uq = interp_at(ul, q);
            let xq = [interp_at(x.map(|p| p[0]), q), interp_at(x.map(|p| p[1]), q)];
            let (_, dg) = g.eval(uq, xq);
            for a in 0..3 {
                for b in 0..3 {
                    let gg = geo.grads[a][0] * geo.grads[b][0] + geo.grads[a][1] * geo.grads[b][1];
                    ke[a][b] += w * (kappa * gg + dg * q[a] * q[b]);
                }
            }
        }
        ke
    })
}

fn diffusion_dm_action(space: &FunctionSpace, m: &[f64], u: &[f64], psi: &[f64]) -> Vec<f64> {
    space.assemble_vector(|c, geo| {
        let ml = space.local_values(c, m);
        let pl = space.local_values(c, psi);
        let du = geo.grad_of(space.local_values(c, u));
        let w = geo.area / 3.0;
        let mut fe = [0.0; 3];
        for q in QUAD_POINTS {
            let coef = w * interp_at(ml, q).exp() * interp_at(pl, q);
            for a in 0..3 {
                fe[a] += coef * (du[0] * geo.grads[a][0] + du[1] * geo.grads[a][1]);
            }
        }
        fe
    })
}

fn diffusion_dm_transpose(space: &FunctionSpace, m: &[f64], u: &[f64], q: &[f64]) -> Vec<f64> {
    space.assemble_vector(|c, geo| {
        let ml = space.local_values(c, m);
        let du = geo.grad_of(space.local_values(c, u));
        let dq = geo.grad_of(space.local_values(c, q));
        let flux = du[0] * dq[0] + du[1] * dq[1];
        let w = geo.area / 3.0;
        let mut fe = [0.0; 3];
        for qp in QUAD_POINTS {
            let coef = w * interp_at(ml, qp).exp() * flux;
            for a in 0..3 {
                fe[a] += coef * qp[a];
            }
        }
        fe
    })
}

/// `-div(e^m grad u) + u^3 = 1` in the unit square, `u = 0` on the boundary.
#[derive(Debug, Clone, Copy, Default)]
pub struct DiffusionReactionProblem;

struct Cubic;

impl Reaction for Cubic {
    #[inline]
    fn eval(&self, u: f64, _x: Point) -> (f64, f64) {
        (u * u * u - 1.0, 3.0 * u * u)
    }
}

impl PdeProblem for DiffusionReactionProblem {
    fn name(&self) -> &'static str {
        "diffusion_reaction"
    }

    fn residual(&self, space: &FunctionSpace, m: &[f64], u: &[f64]) -> Vec<f64> {
        diffusion_residual(&Cubic, space, m, u)
    }

    fn jacobian_u(&self, space: &FunctionSpace, m: &[f64], u: &[f64]) -> CsrMatrix {
        diffusion_jacobian(&Cubic, space, m, u)
    }

    fn dm_action(&self, space: &FunctionSpace, m: &[f64], u: &[f64], psi: &[f64]) -> Vec<f64> {
        diffusion_dm_action(space, m, u, psi)
    }

    fn dm_transpose_action(&self, space: &FunctionSpace, m: &[f64], u: &[f64], q: &[f64]) -> Vec<f64> {
        diffusion_dm_transpose(space, m, u, q)
    }
}

type Source = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// `-div(e^m grad u) = f` with `u = 0` on the boundary.
#[derive(Clone)]
pub struct LinearPoissonProblem {
    source: Source,
}

impl fmt::Debug for LinearPoissonProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearPoissonProblem").finish_non_exhaustive()
    }
}

impl LinearPoissonProblem {
    pub fn new(source: impl Fn(Point) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            source: Arc::new(source),
        }
    }

    pub fn constant_source(f: f64) -> Self {
        Self::new(move |_| f)
    }
}

struct NegSource<'a>(&'a Source);

impl Reaction for NegSource<'_> {
    #[inline]
    fn eval(&self, _u: f64, x: Point) -> (f64, f64) {
        (-(self.0)(x), 0.0)
    }
}

impl PdeProblem for LinearPoissonProblem {
    fn name(&self) -> &'static str {
        "poisson"
    }

    fn residual(&self, space: &FunctionSpace, m: &[f64], u: &[f64]) -> Vec<f64> {
        diffusion_residual(&NegSource(&self.source), space, m, u)
    }

    fn jacobian_u(&self, space: &FunctionSpace, m: &[f64], u: &[f64]) -> CsrMatrix {
        diffusion_jacobian(&NegSource(&self.source), space, m, u)
    }

    fn dm_action(&self, space: &FunctionSpace, m: &[f64], u: &[f64], psi: &[f64]) -> Vec<f64> {
        diffusion_dm_action(space, m, u, psi)
    }

    fn dm_transpose_action(&self, space: &FunctionSpace, m: &[f64], u: &[f64], q: &[f64]) -> Vec<f64> {
        diffusion_dm_transpose(space, m, u, q)
    }
}

/// Full-step Newton settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub max_iter: usize,
    pub atol: f64,
    pub rtol: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_iter: 25,
            atol: 1e-10,
            rtol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub u: FeFunction,
    /// number of Newton updates applied
    pub iterations: usize,
    /// residual norm before each update, plus the final one
    pub residual_history: Vec<f64>,
}

fn boundary_mask(n: usize, nodes: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; n];
    for &b in nodes {
        mask[b] = true;
    }
    mask
}

fn zero_rows(v: &mut [f64], mask: &[bool]) {
    for (x, &fixed) in v.iter_mut().zip(mask) {
        if fixed {
            *x = 0.0;
        }
    }
}

/// Newton's method from the zero initial guess with the exact Jacobian.
pub fn solve_forward(problem: &dyn PdeProblem, m: &FeFunction, cfg: &NewtonConfig) -> Result<ForwardSolution> {
    let space = m.space();
    let n = space.ndofs();
    let bc = problem.dirichlet_nodes(space);
    let mask = boundary_mask(n, &bc);
    let mut u = vec![0.0; n];
    let mut history = Vec::new();
    let mut initial = None;
    for iter in 0..=cfg.max_iter {
        let mut res = problem.residual(space, m.coeffs(), &u);
        zero_rows(&mut res, &mask);
        let norm = norm2(&res);
        history.push(norm);
        if !norm.is_finite() {
            return Err(Error::NonConvergence {
                iterations: iter,
                residual: norm,
            });
        }
        let r0 = *initial.get_or_insert(norm);
        if norm <= cfg.atol || norm <= cfg.rtol * r0 {
            return Ok(ForwardSolution {
                u: FeFunction::new(space.clone(), u)?,
                iterations: iter,
                residual_history: history,
            });
        }
        if iter == cfg.max_iter {
            return Err(Error::NonConvergence {
                iterations: iter,
                residual: norm,
            });
        }
        let jac = problem.jacobian_u(space, m.coeffs(), &u).eliminate_symmetric(&bc);
        let step = Lu::factor(&jac)?.solve(&res);
        for (ui, si) in u.iter_mut().zip(&step) {
            *ui -= si;
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// The linearization of a problem at a solved state `(m, u)`, with the
/// factorized `d_u R` (Dirichlet rows eliminated) cached for reuse.
#[derive(Debug)]
pub struct LinearizedSystem {
    problem: Arc<dyn PdeProblem>,
    space: Arc<FunctionSpace>,
    m: Vec<f64>,
    u: Vec<f64>,
    mask: Vec<bool>,
    factor: Lu,
}

impl LinearizedSystem {
    pub fn new(problem: Arc<dyn PdeProblem>, m: &FeFunction, u: &FeFunction) -> Result<Self> {
        if !m.same_space(u) {
            return Err(Error::invalid("m and u must live on the same space"));
        }
        let space = m.space().clone();
        let bc = problem.dirichlet_nodes(&space);
        let mask = boundary_mask(space.ndofs(), &bc);
        let jac = problem
            .jacobian_u(&space, m.coeffs(), u.coeffs())
            .eliminate_symmetric(&bc);
        let factor = Lu::factor(&jac)?;
        Ok(Self {
            problem,
            space,
            m: m.coeffs().to_vec(),
            u: u.coeffs().to_vec(),
            mask,
            factor,
        })
    }

    /// Forward solve followed by factorization of the linearized operator.
    pub fn solve(problem: Arc<dyn PdeProblem>, m: &FeFunction, cfg: &NewtonConfig) -> Result<(ForwardSolution, Self)> {
        let fwd = solve_forward(problem.as_ref(), m, cfg)?;
        let lin = Self::new(problem, m, &fwd.u)?;
        Ok((fwd, lin))
    }

    pub fn space(&self) -> &Arc<FunctionSpace> {
        &self.space
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn problem(&self) -> &Arc<dyn PdeProblem> {
        &self.problem
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.space.ndofs() {
            return Err(Error::invalid(format!(
                "vector of length {} does not match {} dofs",
                v.len(),
                self.space.ndofs()
            )));
        }
        Ok(())
    }

    /// `p = du(m; psi)`: `<(d_m R) psi, v> + <(d_u R) p, v> = 0`.
    pub fn solve_linearized(&self, psi: &[f64]) -> Result<Vec<f64>> {
        self.check(psi)?;
        let mut rhs = self.problem.dm_action(&self.space, &self.m, &self.u, psi);
        rhs.iter_mut().for_each(|v| *v = -*v);
        zero_rows(&mut rhs, &self.mask);
        Ok(self.factor.solve(&rhs))
    }

    /// `q` with `<q, (d_u R) v> = <p, v>` for all test `v`.
    pub fn solve_adjoint(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check(p)?;
        let mut rhs = self.space.mass().mul_vec(p);
        zero_rows(&mut rhs, &self.mask);
        Ok(self.factor.solve_transpose(&rhs))
    }

    /// Entries `<q, -(d_m R) phi_i>`: the weak form of `d*u(m; p)` when `q`
    /// is the adjoint solution for `p`.
    pub fn apply_dmr_adjoint(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.check(q)?;
        let mut w = self.problem.dm_transpose_action(&self.space, &self.m, &self.u, q);
        w.iter_mut().for_each(|v| *v = -*v);
        Ok(w)
    }

    /// `(grad_m u)^T M (grad_m u) psi` for this sample.
    pub fn gauss_newton_action(&self, psi: &[f64]) -> Result<Vec<f64>> {
        let p = self.solve_linearized(psi)?;
        let q = self.solve_adjoint(&p)?;
        self.apply_dmr_adjoint(&q)
    }

    /// Derivative labels `du(m; psi_k)(x_j)` as an `N_x x r` row-major
    /// array. With `points = None` the labels are taken at the mesh nodes.
    pub fn derivative_labels(&self, directions: &[Vec<f64>], points: Option<&[Point]>) -> Result<Vec<f64>> {
        let nx = points.map_or(self.space.ndofs(), <[Point]>::len);
        let r = directions.len();
        let mut out = vec![0.0; nx * r];
        for (k, psi) in directions.iter().enumerate() {
            let p = self.solve_linearized(psi)?;
            let col = match points {
                Some(pts) => self.space.evaluate(&p, pts)?,
                None => p,
            };
            for (j, v) in col.into_iter().enumerate() {
                out[j * r + k] = v;
            }
        }
        Ok(out)
    }
}

/// Monte Carlo estimate of the H-action over the given samples.
pub fn h_action(samples: &[LinearizedSystem], psi: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("H-action needs at least one sample"));
    }
    let parts: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| s.gauss_newton_action(psi))
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; psi.len()];
    // fixed reduction order
    for part in &parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    let scale = 1.0 / samples.len() as f64;
    acc.iter_mut().for_each(|v| *v *= scale);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{Diagonal, Mesh2D};
    use crate::field::WhittleMaternField;
    use crate::linalg::dot;
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn space(n: usize) -> Arc<FunctionSpace> {
        FunctionSpace::new(Mesh2D::unit_square(n, Diagonal::Right).unwrap())
    }

    fn field(n: usize) -> WhittleMaternField {
        WhittleMaternField::with_constant_mean(space(n), 0.0, 0.4, 0.04).unwrap()
    }

    fn manufactured() -> LinearPoissonProblem {
        LinearPoissonProblem::new(|p| 2.0 * PI * PI * (PI * p[0]).sin() * (PI * p[1]).sin())
    }

    fn l2_error(n: usize) -> f64 {
        let s = space(n);
        let m = FeFunction::zeros(s.clone());
        let sol = solve_forward(&manufactured(), &m, &NewtonConfig::default()).unwrap();
        let exact = FeFunction::interpolate(s.clone(), |p| (PI * p[0]).sin() * (PI * p[1]).sin());
        let diff: Vec<f64> = sol.u.coeffs().iter().zip(exact.coeffs()).map(|(a, b)| a - b).collect();
        crate::fem::l2_norm(&s, &diff)
    }

    #[test]
    fn poisson_converges_at_second_order() {
        let ratio = l2_error(16) / l2_error(32);
        assert!((3.6..=4.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn poisson_takes_one_newton_step() {
        let f = field(8);
        let m = f.sample(3);
        let sol = solve_forward(&LinearPoissonProblem::constant_source(1.0), &m, &NewtonConfig::default()).unwrap();
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn diffusion_reaction_zero_parameter() {
        let s = space(16);
        let m = FeFunction::zeros(s.clone());
        let problem = DiffusionReactionProblem;
        let sol = solve_forward(&problem, &m, &NewtonConfig::default()).unwrap();
        let mut res = problem.residual(&s, m.coeffs(), sol.u.coeffs());
        let mask = boundary_mask(s.ndofs(), &s.mesh().boundary_nodes());
        zero_rows(&mut res, &mask);
        assert!(norm2(&res) < 1e-10);
        assert!(sol.u.coeffs().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn newton_residuals_decrease_and_converge_quadratically() {
        let f = field(32);
        let problem = DiffusionReactionProblem;
        for seed in 0..50 {
            let m = f.sample(500 + seed);
            let sol = match solve_forward(&problem, &m, &NewtonConfig::default()) {
                Ok(sol) => sol,
                Err(Error::NonConvergence { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            let h = &sol.residual_history;
            // terminal phase above roundoff: the log-residual drop accelerates
            let logs: Vec<f64> = h.iter().filter(|&&r| r > 1e-13).map(|r| r.ln()).collect();
            let k = logs.len();
            if k >= 3 {
                let (a, b, c) = (logs[k - 3], logs[k - 2], logs[k - 1]);
                assert!(c - b < b - a, "{h:?}");
            }
            for w in h[1..].windows(2) {
                assert!(w[1] <= w[0], "residual increased: {h:?}");
            }
        }
    }

    #[test]
    fn newton_failure_is_reported() {
        let f = field(8);
        let m = f.sample(1);
        let cfg = NewtonConfig {
            max_iter: 0,
            ..NewtonConfig::default()
        };
        assert!(matches!(
            solve_forward(&DiffusionReactionProblem, &m, &cfg),
            Err(Error::NonConvergence { iterations: 0, .. })
        ));
    }

    #[test]
    fn partial_derivatives_are_consistent_with_finite_differences() {
        let f = field(8);
        let s = f.space().clone();
        let problem = DiffusionReactionProblem;
        let m = f.sample(1);
        let u = f.sample(2);
        let psi = f.sample(3);
        let v = f.sample(4);
        let fd_err = |eps: f64, wrt_m: bool| {
            let shift = |sign: f64| -> Vec<f64> {
                let (mm, uu): (Vec<f64>, Vec<f64>) = if wrt_m {
                    (m.coeffs().iter().zip(psi.coeffs()).map(|(a, b)| a + sign * eps * b).collect(), u.coeffs().to_vec())
                } else {
                    (m.coeffs().to_vec(), u.coeffs().iter().zip(psi.coeffs()).map(|(a, b)| a + sign * eps * b).collect())
                };
                problem.residual(&s, &mm, &uu)
            };
            let fd = (dot(&shift(1.0), v.coeffs()) - dot(&shift(-1.0), v.coeffs())) / (2.0 * eps);
            let exact = if wrt_m {
                dot(&problem.dm_action(&s, m.coeffs(), u.coeffs(), psi.coeffs()), v.coeffs())
            } else {
                dot(&problem.du_action(&s, m.coeffs(), u.coeffs(), psi.coeffs()), v.coeffs())
            };
            (fd - exact).abs()
        };
        for wrt_m in [true, false] {
            let e3 = fd_err(1e-3, wrt_m);
            let e4 = fd_err(1e-4, wrt_m);
            let drop = e3 / e4;
            assert!((10.0..=1000.0).contains(&drop), "wrt_m={wrt_m}: {e3:e} -> {e4:e}");
        }
    }

    #[test]
    fn dm_transpose_matches_per_basis_loop() {
        let f = field(4);
        let s = f.space().clone();
        let problem = DiffusionReactionProblem;
        let m = f.sample(5);
        let u = f.sample(6);
        let q = f.sample(7);
        let w = problem.dm_transpose_action(&s, m.coeffs(), u.coeffs(), q.coeffs());
        for i in 0..s.ndofs() {
            let mut e = vec![0.0; s.ndofs()];
            e[i] = 1.0;
            let want = dot(q.coeffs(), &problem.dm_action(&s, m.coeffs(), u.coeffs(), &e));
            assert!((w[i] - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn linearized_solve_properties() {
        let f = field(8);
        let problem: Arc<dyn PdeProblem> = Arc::new(DiffusionReactionProblem);
        let m = f.sample(10);
        let (_, lin) = LinearizedSystem::solve(problem.clone(), &m, &NewtonConfig::default()).unwrap();
        let n = f.ndofs();
        assert!(lin.solve_linearized(&vec![0.0; n]).unwrap().iter().all(|&v| v == 0.0));
        assert!(lin.solve_adjoint(&vec![0.0; n]).unwrap().iter().all(|&v| v == 0.0));
        assert!(lin.apply_dmr_adjoint(&vec![0.0; n]).unwrap().iter().all(|&v| v == 0.0));

        let (psi1, psi2) = (f.sample(11), f.sample(12));
        let (a, b) = (0.7, -1.3);
        let comb: Vec<f64> = psi1.coeffs().iter().zip(psi2.coeffs()).map(|(x, y)| a * x + b * y).collect();
        let p = lin.solve_linearized(&comb).unwrap();
        let p1 = lin.solve_linearized(psi1.coeffs()).unwrap();
        let p2 = lin.solve_linearized(psi2.coeffs()).unwrap();
        let scale = norm2(&p);
        for i in 0..n {
            assert!((p[i] - (a * p1[i] + b * p2[i])).abs() < 1e-10 * scale);
        }

        // central finite differences of the solution map
        let eps = 1e-4;
        let shifted = |sign: f64| {
            let mm: Vec<f64> = m.coeffs().iter().zip(psi1.coeffs()).map(|(x, y)| x + sign * eps * y).collect();
            let mm = FeFunction::new(f.space().clone(), mm).unwrap();
            solve_forward(problem.as_ref(), &mm, &NewtonConfig::default()).unwrap().u.into_coeffs()
        };
        let (up, um) = (shifted(1.0), shifted(-1.0));
        let fd: Vec<f64> = up.iter().zip(&um).map(|(x, y)| (x - y) / (2.0 * eps)).collect();
        let diff: Vec<f64> = p1.iter().zip(&fd).map(|(x, y)| x - y).collect();
        let rel = crate::fem::l2_norm(f.space(), &diff) / crate::fem::l2_norm(f.space(), &p1);
        assert!(rel < 1e-4, "{rel:e}");
    }

    #[test]
    fn adjoint_identity() {
        let f = field(8);
        let problem: Arc<dyn PdeProblem> = Arc::new(DiffusionReactionProblem);
        let m = f.sample(20);
        let (_, lin) = LinearizedSystem::solve(problem, &m, &NewtonConfig::default()).unwrap();
        let mass = f.space().mass();
        for k in 0..5 {
            let psi = f.sample(30 + k);
            let v = f.sample(40 + k);
            let p = lin.solve_linearized(psi.coeffs()).unwrap();
            let lhs = dot(&p, &mass.mul_vec(v.coeffs()));
            let q = lin.solve_adjoint(v.coeffs()).unwrap();
            let rhs = dot(psi.coeffs(), &lin.apply_dmr_adjoint(&q).unwrap());
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn poisson_adjoint_equals_forward_type_solve() {
        let f = field(8);
        let problem: Arc<dyn PdeProblem> = Arc::new(LinearPoissonProblem::constant_source(1.0));
        let m = f.sample(2);
        let (_, lin) = LinearizedSystem::solve(problem.clone(), &m, &NewtonConfig::default()).unwrap();
        let p = f.sample(3);
        let q = lin.solve_adjoint(p.coeffs()).unwrap();
        // symmetric operator: the forward-type system with load M p
        let s = f.space();
        let bc = s.mesh().boundary_nodes();
        let jac = problem.jacobian_u(s, m.coeffs(), lin.u()).eliminate_symmetric(&bc);
        let mut rhs = s.mass().mul_vec(p.coeffs());
        let mask = boundary_mask(s.ndofs(), &bc);
        zero_rows(&mut rhs, &mask);
        let q2 = crate::linalg::Cholesky::factor(&jac).unwrap().solve(&rhs);
        let scale = norm2(&q);
        for (a, b) in q.iter().zip(&q2) {
            assert!((a - b).abs() < 1e-10 * scale);
        }
    }

    /// Dense Jacobian of the nodal solution map, built column by column.
    fn dense_jacobian(lin: &LinearizedSystem) -> DMatrix<f64> {
        let n = lin.space().ndofs();
        let mut j = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            let col = lin.solve_linearized(&e).unwrap();
            for r in 0..n {
                j[(r, c)] = col[r];
            }
        }
        j
    }

    #[test]
    fn h_action_matches_dense_jacobian_and_is_symmetric() {
        let f = field(8);
        let problem: Arc<dyn PdeProblem> = Arc::new(LinearPoissonProblem::constant_source(1.0));
        let m = f.sample(4);
        let (_, lin) = LinearizedSystem::solve(problem, &m, &NewtonConfig::default()).unwrap();
        let j = dense_jacobian(&lin);
        let h = j.transpose() * f.space().mass().to_dense() * &j;
        let psi = f.sample(5);
        let got = h_action(std::slice::from_ref(&lin), psi.coeffs()).unwrap();
        let want = &h * nalgebra::DVector::from_column_slice(psi.coeffs());
        let scale = want.amax();
        for i in 0..f.ndofs() {
            assert!((got[i] - want[i]).abs() < 1e-10 * scale);
        }
        let phi = f.sample(6);
        let hphi = h_action(std::slice::from_ref(&lin), phi.coeffs()).unwrap();
        let a = dot(&got, phi.coeffs());
        let b = dot(psi.coeffs(), &hphi);
        assert!((a - b).abs() < 1e-8 * norm2(&got) * norm2(phi.coeffs()));
        assert!(h_action(std::slice::from_ref(&lin), &vec![0.0; f.ndofs()]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn h_action_mean_is_linear_over_sample_sets() {
        let f = field(6);
        let problem: Arc<dyn PdeProblem> = Arc::new(DiffusionReactionProblem);
        let lins: Vec<LinearizedSystem> = (0..4)
            .map(|i| LinearizedSystem::solve(problem.clone(), &f.sample(60 + i), &NewtonConfig::default()).unwrap().1)
            .collect();
        let psi = f.sample(70);
        let all = h_action(&lins, psi.coeffs()).unwrap();
        let a = h_action(&lins[..2], psi.coeffs()).unwrap();
        let b = h_action(&lins[2..], psi.coeffs()).unwrap();
        for i in 0..all.len() {
            assert!((all[i] - 0.5 * (a[i] + b[i])).abs() < 1e-12 * (1.0 + all[i].abs()));
        }
        assert!(h_action(&[], psi.coeffs()).is_err());
    }

    #[test]
    fn derivative_labels_at_nodes_and_points() {
        let f = field(8);
        let problem: Arc<dyn PdeProblem> = Arc::new(DiffusionReactionProblem);
        let m = f.sample(80);
        let (_, lin) = LinearizedSystem::solve(problem.clone(), &m, &NewtonConfig::default()).unwrap();
        let dirs = vec![f.sample(81).into_coeffs(), vec![0.0; f.ndofs()]];
        let labels = lin.derivative_labels(&dirs, None).unwrap();
        let p = lin.solve_linearized(&dirs[0]).unwrap();
        for j in 0..f.ndofs() {
            assert_eq!(labels[j * 2], p[j]);
            assert_eq!(labels[j * 2 + 1], 0.0);
        }

        // FD of point evaluations
        let pts = [[0.3, 0.4], [0.71, 0.52], [0.5, 0.5]];
        let at_pts = lin.derivative_labels(&dirs[..1], Some(&pts)).unwrap();
        let eps = 1e-4;
        let eval_shift = |sign: f64| {
            let mm: Vec<f64> = m.coeffs().iter().zip(&dirs[0]).map(|(x, y)| x + sign * eps * y).collect();
            let mm = FeFunction::new(f.space().clone(), mm).unwrap();
            let u = solve_forward(problem.as_ref(), &mm, &NewtonConfig::default()).unwrap().u;
            u.evaluate(&pts).unwrap()
        };
        let (a, b) = (eval_shift(1.0), eval_shift(-1.0));
        let fd: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * eps)).collect();
        let err = norm2(&fd.iter().zip(&at_pts).map(|(x, y)| x - y).collect::<Vec<_>>());
        assert!(err < 1e-4 * norm2(&at_pts));
    }
}
