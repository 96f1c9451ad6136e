//! Stability audit for deep stacks of binary restricted Boltzmann machines.
//!
//! The crate treats each layer of a trained stack as one step of a
//! renormalization flow on distributions over binary configurations. From
//! Monte Carlo samples it estimates the layer-to-layer stability matrix of
//! that flow, flags expanding (relevant) directions, chains per-layer
//! Jacobians into the Fisher information of the input-to-deep-layer map,
//! and evaluates adversarial perturbations along the stiffest input
//! directions. Exact enumeration oracles reproduce every sampled quantity
//! on small stacks; the sampled estimators are validated against them
//! before being trusted at scale.

pub mod error;
pub mod exact;
pub mod fim;
pub mod fixtures;
pub mod linalg;
pub mod mcrg;
pub mod operators;
pub mod pipeline;
pub mod rbm;
pub mod train;

pub use error::{AuditError, Result};
