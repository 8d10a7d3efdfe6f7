//! Deterministic simulator and verification toolkit for federated averaging
//! under stochastic, non-uniform, unknown client participation.
//!
//! The crate models round-wise client availability as a distribution over
//! subsets of clients, derives the marginal survival weights that this
//! process induces, runs federated averaging (agnostic or weighted
//! aggregation) over convex local objectives, and numerically checks the
//! inequalities that govern its convergence.
//!
//! Modules:
//! - [`availability`]: subset distributions, participation samplers, and
//!   marginal survival weights.
//! - [`optimization`]: convex losses, minibatch gradients, ball projection,
//!   projected SGD steps, and reference optima.
//! - [`data`]: synthetic regression federations, IDX ingestion, and
//!   client partitioning.
//! - [`engine`]: the federated-averaging round loop and its traces.
//! - [`analysis`]: numerical inequality checkers and rate fitting.
//!
//! Everything is deterministic given a seed: randomness enters only through
//! explicit stream handles derived in [`rng`], and the data-parallel helpers
//! in [`par`] are bit-reproducible whether they run on one thread or many.

pub mod analysis;
pub mod availability;
pub mod data;
pub mod engine;
pub mod error;
pub mod optimization;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
