//! Loss-calibrated variational inference for dropout Bayesian neural
//! networks.
//!
//! A dropout network trained with the usual objective learns an
//! approximate posterior that ignores how its predictions will be used.
//! The loss-calibrated objective adds, per training example, the penalty
//! `-log Σ_c u(h*, c) p(c | x, ω̂)`, where `u` is a task utility and `h*` the
//! prediction that currently maximizes expected utility. Training alternates
//! between choosing `h*` by Monte Carlo dropout and one gradient step on the
//! penalized loss.
//!
//! Modules:
//! - [`nn`]: dense networks, dropout masks, softmax, backprop.
//! - [`decision`]: utilities, conditional gains and optimal predictions.
//! - [`objective`]: standard, weighted and loss-calibrated losses.
//! - [`oracle`]: an enumerable weight-space model where the bound and its
//!   KL identity can be computed exactly.
//! - [`trainer`]: the alternating optimisation loop and checkpoints.
//! - [`data`]: synthetic diagnosis data, MNIST IDX files, label corruption.
//! - [`experiment`]: config-driven runs, sweeps and self-checks.

pub mod data;
pub mod decision;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod objective;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
