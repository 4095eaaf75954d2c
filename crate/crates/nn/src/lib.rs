//! Reverse-mode differentiation on dense matrices, a DeepONet with Fourier
//! feature trunk inputs, and the AdamW optimizer.

pub mod error;
pub mod graph;
pub mod model;
pub mod optim;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Matrix, Var};
pub use model::{deeponet_head, fourier_embed, Activation, DeepOnet, DeepOnetConfig, Outputs, Point, Scaling};
pub use optim::{AdamW, AdamWConfig};
