//! Test-set accuracy of predictions and of their directional derivatives.

use std::sync::Arc;

use deonet_core::fem::{h1_norm, l2_norm};
use deonet_core::{Dataset, FeFunction, LinearizedSystem, PdeProblem, ReducedBasis};
use deonet_nn::{DeepOnet, Matrix};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::DEFAULT_EPSILON;

const PREDICTION_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_dir: usize,
    pub seed: u64,
    pub epsilon_err: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_dir: 128,
            seed: 0,
            epsilon_err: DEFAULT_EPSILON,
        }
    }
}

/// Seed of the `l`-th test direction, kept apart from sample seeds.
pub fn direction_seed(seed: u64, l: usize) -> u64 {
    (seed ^ 0x5DEE_CE66_D1CE_4E5B).wrapping_add(l as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub seed: u64,
    pub l2: f64,
    pub h1: f64,
    pub dm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_test: usize,
    pub n_dir: usize,
    pub direction_seeds: Vec<u64>,
    pub mean_l2: f64,
    pub mean_h1: f64,
    pub mean_dm: f64,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    fn from_samples(per_sample: Vec<SampleMetrics>, direction_seeds: Vec<u64>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Self {
            n_test: per_sample.len(),
            n_dir: direction_seeds.len(),
            mean_l2: mean(|s| s.l2),
            mean_h1: mean(|s| s.h1),
            mean_dm: mean(|s| s.dm),
            direction_seeds,
            per_sample,
        }
    }

    /// One row per test sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,seed,l2,h1,dm\n");
        for s in &self.per_sample {
            out.push_str(&format!("{},{},{:e},{:e},{:e}\n", s.index, s.seed, s.l2, s.h1, s.dm));
        }
        out
    }
}

/// Nodal predictions and branch-input Jacobians of a test set in physical
/// units. `u` is `N x N_x`; `jac` rows `i r .. (i + 1) r` belong to sample
/// `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub u: Matrix,
    pub jac: Matrix,
}

/// Model outputs for every test sample at the given nodes, computed in
/// fixed-size chunks.
pub fn predict_test_set(model: &DeepOnet, test: &Dataset, nodes: &[[f64; 2]]) -> Result<Predictions> {
    let (n, r) = (test.len(), test.rank);
    let mut u = Matrix::zeros(n, nodes.len());
    let mut jac = Matrix::zeros(n * r, nodes.len());
    for start in (0..n).step_by(PREDICTION_CHUNK) {
        let end = (start + PREDICTION_CHUNK).min(n);
        let inputs = Matrix::from_row_slice(end - start, r, &test.m_reduced[start * r..end * r]);
        let (p, j) = model.predict_with_jacobian(&inputs, nodes)?;
        u.rows_mut(start, end - start).copy_from(&p[0]);
        jac.rows_mut(start * r, (end - start) * r).copy_from(&j[0]);
    }
    Ok(Predictions { u, jac })
}

/// Relative L2, H1 and Frobenius derivative errors on every test sample.
/// True directional derivatives come from linearized solves at the stored
/// solutions; predicted ones from the model Jacobian applied to the reduced
/// directions. Samples are processed in parallel on the current thread pool.
pub fn evaluate_metrics(
    model: &DeepOnet,
    test: &Dataset,
    basis: &ReducedBasis,
    problem: Arc<dyn PdeProblem>,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let cfg = model.config();
    if cfg.n_u != 1 || cfg.input_dim != basis.rank() {
        return Err(Error::invalid(format!(
            "model maps {} inputs to {} outputs, basis rank is {}",
            cfg.input_dim,
            cfg.n_u,
            basis.rank()
        )));
    }
    check_test_set(test, basis)?;
    let direction_seeds: Vec<u64> = (0..config.n_dir).map(|l| direction_seed(config.seed, l)).collect();
    let directions: Vec<Vec<f64>> = direction_seeds
        .iter()
        .map(|&s| basis.field().sample(s).into_coeffs())
        .collect();
    let pred = predict_test_set(model, test, basis.field().space().mesh().nodes())?;
    let per_sample = metrics_from_predictions(test, basis, problem, &pred, &directions, config.epsilon_err)?;
    Ok(MetricsReport::from_samples(per_sample, direction_seeds))
}

fn check_test_set(test: &Dataset, basis: &ReducedBasis) -> Result<()> {
    let ndofs = basis.field().space().ndofs();
    if test.rank != basis.rank() {
        return Err(Error::invalid(format!("data rank {} differs from basis rank {}", test.rank, basis.rank())));
    }
    if test.n_x != ndofs || test.ndofs != ndofs {
        return Err(Error::invalid("test data does not live on the basis mesh"));
    }
    Ok(())
}

/// Per-sample metrics of precomputed predictions along explicit nodal
/// directions.
pub fn metrics_from_predictions(
    test: &Dataset,
    basis: &ReducedBasis,
    problem: Arc<dyn PdeProblem>,
    pred: &Predictions,
    directions: &[Vec<f64>],
    eps: f64,
) -> Result<Vec<SampleMetrics>> {
    check_test_set(test, basis)?;
    let r = test.rank;
    if pred.u.shape() != (test.len(), test.n_x) || pred.jac.shape() != (test.len() * r, test.n_x) {
        return Err(Error::invalid("prediction shapes do not match the test set"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("epsilon_err must be positive"));
    }
    let space = basis.field().space().clone();
    let reduced: Vec<Vec<f64>> = directions
        .iter()
        .map(|w| basis.reduce_coeffs(w))
        .collect::<deonet_core::Result<_>>()?;
    (0..test.len())
        .into_par_iter()
        .map(|i| -> Result<SampleMetrics> {
            let u_true = test.u_of(i);
            let diff: Vec<f64> = pred.u.row(i).iter().zip(u_true).map(|(a, b)| a - b).collect();
            let l2 = l2_norm(&space, &diff) / (eps + l2_norm(&space, u_true));
            let h1 = h1_norm(&space, &diff) / (eps + h1_norm(&space, u_true));
            let dm = if directions.is_empty() {
                0.0
            } else {
                let m = FeFunction::new(space.clone(), test.m_of(i).to_vec())?;
                let u = FeFunction::new(space.clone(), u_true.to_vec())?;
                let sys = LinearizedSystem::new(problem.clone(), &m, &u)?;
                let jac = pred.jac.rows(i * r, r);
                let (mut num, mut den) = (0.0, 0.0);
                for (w, wr) in directions.iter().zip(&reduced) {
                    let du = sys.solve_linearized(w)?;
                    let du_hat = jac.tr_mul(&DVector::from_column_slice(wr));
                    for (a, b) in du_hat.iter().zip(&du) {
                        num += (a - b) * (a - b);
                        den += b * b;
                    }
                }
                num.sqrt() / (eps + den.sqrt())
            };
            Ok(SampleMetrics {
                index: i,
                seed: test.seeds[i],
                l2,
                h1,
                dm,
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
