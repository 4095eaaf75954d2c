//! Double-pass randomized solver for dominant generalized eigenpairs
//! `A psi = lambda B psi`, with `A` symmetric positive semidefinite and `B`
//! symmetric positive definite. Operators are only accessed through their
//! actions.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};

/// Columns whose B-norm drops below this fraction of their norm before
/// orthogonalization are treated as lying in the span of earlier columns.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GeneralizedEig {
    /// nonincreasing
    pub eigenvalues: Vec<f64>,
    /// B-orthonormal eigenvectors, one per eigenvalue
    pub eigenvectors: Vec<Vec<f64>>,
}

/// Gaussian test matrix, column-major `n x k`, from a seeded stream.
pub fn gaussian_columns(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// B-orthonormalizes `cols` with two rounds of modified Gram-Schmidt.
/// Columns that collapse are dropped; the survivors are returned.
pub fn b_orthonormalize<B>(cols: Vec<Vec<f64>>, apply_b: &B) -> Vec<Vec<f64>>
where
    B: Fn(&[f64]) -> Vec<f64>,
{
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    let mut bq: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    for mut y in cols {
        let by = apply_b(&y);
        let initial = dot(&y, &by).max(0.0).sqrt();
        if initial == 0.0 || !initial.is_finite() {
            continue;
        }
        for _pass in 0..2 {
            for (qi, bqi) in q.iter().zip(&bq) {
                let c = dot(bqi, &y);
                axpy(-c, qi, &mut y);
            }
        }
        let by = apply_b(&y);
        let norm = dot(&y, &by).max(0.0).sqrt();
        if norm < RANK_TOLERANCE * initial {
            continue;
        }
        y.iter_mut().for_each(|v| *v /= norm);
        q.push(y);
        bq.push(by.into_iter().map(|v| v / norm).collect());
    }
    q
}

/// Dominant `r` generalized eigenpairs with oversampling `s`.
///
/// Sketch `Y = B^-1 A Omega`, B-orthonormalize to `Q`, project
/// `T = Q^T A Q`, and lift the top eigenvectors of `T` back through `Q`.
pub fn double_pass<A, B, BInv>(
    apply_a: A,
    apply_b: B,
    apply_b_inv: BInv,
    n: usize,
    r: usize,
    s: usize,
    seed: u64,
) -> Result<GeneralizedEig>
where
    A: Fn(&[f64]) -> Vec<f64>,
    B: Fn(&[f64]) -> Vec<f64>,
    BInv: Fn(&[f64]) -> Vec<f64>,
{
    if r == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    if r + s > n {
        return Err(Error::invalid(format!("r + s = {} exceeds dimension {n}", r + s)));
    }
    let omega = gaussian_columns(n, r + s, seed);
    let y: Vec<Vec<f64>> = omega.iter().map(|w| apply_b_inv(&apply_a(w))).collect();
    let q = b_orthonormalize(y, &apply_b);
    if q.len() < r {
        return Err(Error::DegenerateOperator {
            rank: q.len(),
            requested: r,
        });
    }

    // second pass over A
    let aq: Vec<Vec<f64>> = q.iter().map(|qi| apply_a(qi)).collect();
    let k = q.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            t[(i, j)] = dot(&q[i], &aq[j]);
        }
    }
    let t = (&t + t.transpose()) * 0.5;
    let eig = SymmetricEigen::new(t);

    let mut order: Vec<usize> = (0..k).collect();
    // stable sort keeps the dense solver's order among ties
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut eigenvalues = Vec::with_capacity(r);
    let mut eigenvectors = Vec::with_capacity(r);
    for &idx in order.iter().take(r) {
        eigenvalues.push(eig.eigenvalues[idx]);
        let mut v = vec![0.0; n];
        for (j, qj) in q.iter().enumerate() {
            axpy(eig.eigenvectors[(j, idx)], qj, &mut v);
        }
        eigenvectors.push(v);
    }
    Ok(GeneralizedEig {
        eigenvalues,
        eigenvectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn dense_op(m: &DMatrix<f64>) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
        move |x| (m * DVector::from_column_slice(x)).as_slice().to_vec()
    }

    #[test]
    fn low_rank_diagonal_is_exact() {
        let n = 10;
        let mut a = DMatrix::zeros(n, n);
        for (i, v) in [16.0, 9.0, 4.0, 1.0].iter().enumerate() {
            a[(i, i)] = *v;
        }
        let id = |x: &[f64]| x.to_vec();
        let res = double_pass(dense_op(&a), id, id, n, 3, 5, 7).unwrap();
        for (got, want) in res.eigenvalues.iter().zip([16.0, 9.0, 4.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn identical_operators_give_unit_spectrum() {
        let n = 12;
        let mut b = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            b[(i, i)] = 2.0 + i as f64;
            if i + 1 < n {
                b[(i, i + 1)] = 0.5;
                b[(i + 1, i)] = 0.5;
            }
        }
        let binv = b.clone().try_inverse().unwrap();
        let res = double_pass(dense_op(&b), dense_op(&b), dense_op(&binv), n, 4, 4, 3).unwrap();
        for l in &res.eigenvalues {
            assert!((l - 1.0).abs() < 1e-10);
        }
        // B-orthonormal
        for i in 0..4 {
            for j in 0..4 {
                let bij = dot(&res.eigenvectors[i], &dense_op(&b)(&res.eigenvectors[j]));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((bij - want).abs() < 1e-10);
            }
        }
    }

    /// Random SPD `B` and `A = B V diag(lambda) V^T B` with B-orthonormal `V`,
    /// so the pencil's spectrum is exactly `lambda`.
    fn pencil(n: usize, lambda: &[f64], seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let g = DMatrix::from_column_slice(n, n, &gaussian_columns(n, n, seed).concat());
        let b = &g * g.transpose() / n as f64 + DMatrix::identity(n, n);
        let l = b.clone().cholesky().unwrap().l();
        let q = g.qr().q();
        let v = l.transpose().try_inverse().unwrap() * q;
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(lambda));
        let a = &b * &v * d * v.transpose() * &b;
        ((&a + a.transpose()) * 0.5, b)
    }

    #[test]
    fn fast_decay_gives_small_residuals_and_seed_robustness() {
        let n = 60;
        let lambda: Vec<f64> = (0..n).map(|k| 0.25f64.powi(k as i32)).collect();
        let (a, b) = pencil(n, &lambda, 11);
        let binv = b.clone().try_inverse().unwrap();
        let (r, s) = (8, 10);
        let one = double_pass(dense_op(&a), dense_op(&b), dense_op(&binv), n, r, s, 1).unwrap();
        let two = double_pass(dense_op(&a), dense_op(&b), dense_op(&binv), n, r, s, 2).unwrap();
        for k in 0..r {
            let psi = &one.eigenvectors[k];
            let av = dense_op(&a)(psi);
            let bv = dense_op(&b)(psi);
            let res: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x - one.eigenvalues[k] * y).collect();
            let rel = crate::linalg::norm2(&res) / (one.eigenvalues[0] * crate::linalg::norm2(&bv));
            assert!(rel < 1e-6, "pair {k}: {rel:e}");
            assert!((one.eigenvalues[k] - lambda[k]).abs() < 1e-6 * lambda[k]);
            assert!((one.eigenvalues[k] - two.eigenvalues[k]).abs() < 1e-6 * lambda[k]);
        }
    }

    #[test]
    fn zero_operator_is_degenerate() {
        let n = 6;
        let zero = |x: &[f64]| vec![0.0; x.len()];
        let id = |x: &[f64]| x.to_vec();
        assert!(matches!(
            double_pass(zero, id, id, n, 2, 2, 1),
            Err(Error::DegenerateOperator { rank: 0, .. })
        ));
    }

    #[test]
    fn oversampling_bound_checked() {
        let id = |x: &[f64]| x.to_vec();
        assert!(matches!(double_pass(id, id, id, 5, 3, 3, 1), Err(Error::InvalidArgument(_))));
    }
}
