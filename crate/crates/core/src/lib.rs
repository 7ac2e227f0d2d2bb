//! Desk-scale federated learning with density-ratio client routing.
//!
//! Every client trains two softmax heads on top of a shared embedding: a
//! per-client target classifier and a single shared client classifier whose
//! argmax routes new queries to the client that most likely produced them.
//! The training loss is the negative profile empirical log-likelihood of a
//! density ratio model, which collapses to two cross-entropy terms traded off
//! by a reweighting parameter `lambda`.
//!
//! Module map:
//!
//! - [`net`]: MLP embeddings `g(x)` and `h(g(x))` with hand-written backprop.
//! - [`loss`]: the two heads and the reweighted dual loss.
//! - [`el`]: primal empirical-likelihood machinery used as a duality oracle.
//! - [`partition`]: non-IID partitioners, covariate shifts and synthetic generators.
//! - [`federation`]: the local-SGD / weighted-aggregation training engine.
//! - [`metrics`]: routing, accuracies, gradient drift and Fisher information.
//! - [`theory`]: fixed-embedding convergence and statistical-error experiments.
//! - [`cli`]: config-driven batch entry points.

pub mod cli;
pub mod el;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::Matrix;

/// Version string embedded in every output file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
