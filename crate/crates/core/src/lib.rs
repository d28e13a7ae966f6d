//! Bayesian optimization for high-dimensional, noisy black-box minimization
//! driven by an aggregate of Gaussian-process submodels.
//!
//! Each submodel is fitted on a random subset of the design points after a
//! linear embedding into a lower-dimensional space. Submodels are combined
//! with posterior model weights into a single Gaussian process that drives
//! the acquisition. Replications are budgeted with a growing per-point floor
//! and optimal computing budget allocation.
//!
//! Module map:
//! * [`gp`]: stochastic GP regression with a Bayesian linear mean.
//! * [`embedding`]: Gaussian, PCA and identity embeddings.
//! * [`aggregate`]: subset partitioning, Bayes weights, aggregated model.
//! * [`acquisition`]: EI, LCB, Thompson sampling and the inner optimizer.
//! * [`allocation`]: replication floors and OCBA.
//! * [`optimizer`]: the optimization loop.

pub mod acquisition;
pub mod aggregate;
pub mod allocation;
pub mod error;
pub mod embedding;
pub mod gp;
pub mod optim;
pub mod optimizer;

pub use error::{Error, Result};
