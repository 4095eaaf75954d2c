//! Numerical core for derivative-enhanced operator learning: P1 finite
//! elements on the unit square, Whittle-Matérn random fields, randomized
//! generalized eigensolvers, reduced parameter bases and the benchmark PDEs
//! with their linearized and adjoint solves.

pub mod basis;
pub mod dataset;
pub mod eigen;
pub mod error;
pub mod fem;
pub mod field;
pub mod linalg;
pub mod pde;

pub use basis::{compute_asm_basis, compute_kle_basis, reconstruction_error, AsmSettings, BasisMethod, ReducedBasis};
pub use dataset::{generate_dataset, Dataset, SkippedSample};
pub use error::{Error, Result};
pub use fem::{Diagonal, FeFunction, FunctionSpace, Mesh2D, Point};
pub use field::WhittleMaternField;
pub use pde::{
    solve_forward, DiffusionReactionProblem, ForwardSolution, LinearPoissonProblem, LinearizedSystem, NewtonConfig,
    PdeProblem,
};
