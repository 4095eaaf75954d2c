//! Training / test sample generation: parameter draws, forward solutions,
//! reduced coordinates, and derivative labels in the reduced directions.

use std::sync::Arc;

use rayon::prelude::*;

use crate::basis::ReducedBasis;
use crate::error::{Error, Result};
use crate::pde::{LinearizedSystem, NewtonConfig, PdeProblem};

/// A sample whose solve failed and was left out of the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedSample {
    pub index: usize,
    pub seed: u64,
    pub reason: String,
}

/// Flattened, row-major dataset arrays. Sample `i` owns rows
/// `i * ndofs .. (i + 1) * ndofs` of `m`, and likewise for the others.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ndofs: usize,
    pub n_x: usize,
    pub rank: usize,
    pub seeds: Vec<u64>,
    /// `(N, ndofs)` nodal parameters
    pub m: Vec<f64>,
    /// `(N, r)` reduced coordinates
    pub m_reduced: Vec<f64>,
    /// `(N, N_x)` nodal solutions
    pub u: Vec<f64>,
    /// `(N, N_x, r)` directional derivatives along the basis vectors
    pub du: Vec<f64>,
    pub newton_iterations: Vec<usize>,
    pub skipped: Vec<SkippedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn m_of(&self, i: usize) -> &[f64] {
        &self.m[i * self.ndofs..(i + 1) * self.ndofs]
    }

    pub fn reduced_of(&self, i: usize) -> &[f64] {
        &self.m_reduced[i * self.rank..(i + 1) * self.rank]
    }

    pub fn u_of(&self, i: usize) -> &[f64] {
        &self.u[i * self.n_x..(i + 1) * self.n_x]
    }

    pub fn du_of(&self, i: usize) -> &[f64] {
        let stride = self.n_x * self.rank;
        &self.du[i * stride..(i + 1) * stride]
    }
}

struct SampleOutput {
    m: Vec<f64>,
    m_reduced: Vec<f64>,
    u: Vec<f64>,
    du: Vec<f64>,
    iterations: usize,
}

fn generate_one(
    basis: &ReducedBasis,
    problem: &Arc<dyn PdeProblem>,
    newton: &NewtonConfig,
    seed: u64,
) -> Result<SampleOutput> {
    let m = basis.field().sample(seed);
    let (fwd, lin) = LinearizedSystem::solve(problem.clone(), &m, newton)?;
    let du = lin.derivative_labels(basis.vectors(), None)?;
    let m_reduced = basis.reduce(&m)?;
    Ok(SampleOutput {
        m: m.into_coeffs(),
        m_reduced,
        u: fwd.u.into_coeffs(),
        du,
        iterations: fwd.iterations,
    })
}

/// Generates `n` samples with seeds `base_seed + i` on `threads` worker
/// threads. Samples whose solves fail are skipped and recorded; the output
/// does not depend on the thread count.
pub fn generate_dataset(
    basis: &ReducedBasis,
    problem: Arc<dyn PdeProblem>,
    newton: &NewtonConfig,
    n: usize,
    base_seed: u64,
    threads: usize,
) -> Result<Dataset> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outputs: Vec<(u64, Result<SampleOutput>)> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let seed = base_seed.wrapping_add(i as u64);
                (seed, generate_one(basis, &problem, newton, seed))
            })
            .collect()
    });

    let ndofs = basis.ndofs();
    let rank = basis.rank();
    let mut ds = Dataset {
        ndofs,
        n_x: ndofs,
        rank,
        seeds: Vec::with_capacity(n),
        m: Vec::with_capacity(n * ndofs),
        m_reduced: Vec::with_capacity(n * rank),
        u: Vec::with_capacity(n * ndofs),
        du: Vec::with_capacity(n * ndofs * rank),
        newton_iterations: Vec::with_capacity(n),
        skipped: Vec::new(),
    };
    for (index, (seed, out)) in outputs.into_iter().enumerate() {
        match out {
            Ok(s) => {
                ds.seeds.push(seed);
                ds.m.extend(s.m);
                ds.m_reduced.extend(s.m_reduced);
                ds.u.extend(s.u);
                ds.du.extend(s.du);
                ds.newton_iterations.push(s.iterations);
            }
            Err(e) => {
                log::warn!("sample {index} (seed {seed}) skipped: {e}");
                ds.skipped.push(SkippedSample {
                    index,
                    seed,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(ds)
}
