//! Learning controllable latent features on small gridworlds.
//!
//! An autoencoder is trained jointly with one policy per latent feature so
//! that each policy learns to change exactly its own feature: the policies
//! maximize the *selectivity* of their feature (the fraction of total latent
//! change attributable to it), while the autoencoder keeps reconstructing
//! the observations. The crate ships its own small reverse-mode autodiff
//! engine, two gridworld environments, exact-enumeration and score-function
//! policy-gradient estimators, evaluation diagnostics, and a CLI for running
//! reproducible experiments.
//!
//! The numeric core is generic over the scalar type via [`scalar::Scalar`];
//! the experiment pipeline and the CLI instantiate everything at `f64` (see
//! the type aliases at the crate root).

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod report;
pub mod scalar;
pub mod selectivity;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{grad_check, NodeId, Padding, Tape};
pub use tensor::Tensor;

/// Scalar type used by the shipped experiments and the CLI.
pub type Real = f64;

/// Concrete aliases at the working precision.
pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type Model64 = model::Model<f64>;
pub type GridState64 = env::GridState<f64>;

/// Reduced-precision aliases for callers that want the smaller footprint.
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
