//! Softmax attention as a map on token measures.
//!
//! The crate covers four layers:
//!
//! * [`measures`]: Gaussian and empirical token measures with seeded samplers;
//! * [`attention`]: softmax attention on empirical prompts, its closed form on
//!   Gaussian prompts, and exact gradients in the `(U, V)` and `(K, Q, V)`
//!   parametrizations;
//! * [`concentration`]: Monte-Carlo sweeps of the finite-prompt deviation from
//!   the infinite-prompt limit, with log-log rate fits;
//! * [`icl`] and [`flow`]: in-context linear regression risks and gradient-flow
//!   training in the infinite-prompt and finite-prompt regimes.
//!
//! [`experiments`] bundles these into the configurable runs used by the
//! `softmax-lab` binary.

pub mod attention;
pub mod concentration;
pub mod config;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod gradcheck;
pub mod icl;
pub mod linalg;
pub mod measures;
pub mod par;
pub mod plot;
pub mod rng;

pub use error::{Error, Result};
