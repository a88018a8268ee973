//! Gradient-free adaptation of zero-shot vision-language classifiers to a
//! shifted test stream, operating entirely on precomputed embeddings.

pub mod adaptation;
pub mod bdc;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod io;
pub mod numerics;
pub mod selftest;
pub mod synthetic;
pub mod textspace;

pub use config::{Mode, RunConfig, Toggles};
pub use error::{Result, TataError};
pub use exec::Execution;
pub use numerics::{Embedding, PredictionDistribution, Role};
