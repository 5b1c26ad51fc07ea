//! Continual representation learning over streaming graphs.
//!
//! The crate trains disentangled node embeddings on a stream of graph
//! parts and keeps earlier parts from being forgotten by selectively
//! replaying related old instances with component-masked updates.
//! Classic continual baselines (quadratic penalties, episodic replay,
//! gradient projection) share the same model and training loop so the
//! strategies stay comparable.
//!
//! Numeric code is generic over the scalar type via [`num::Real`];
//! [`Scalar`] is the concrete type the shipped pipeline and CLI use.

pub mod baselines;
pub mod continual;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod num;
pub mod optim;
pub mod pipeline;
pub mod scorers;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};

/// Scalar type used by the shipped pipeline, CLI and file formats.
pub type Scalar = f64;
