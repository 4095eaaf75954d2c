//! Pipeline front end: configuration, artifact formats and the
//! `generate` / `basis` / `train` / `eval` / `report` stages.

pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;
pub mod container;
pub mod error;

pub use cli::{run, Cli};
pub use config::RunConfig;
pub use container::{ContainerError, Tensor};
pub use error::CliError;
