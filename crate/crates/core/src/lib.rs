//! Gated DeltaProduct linear RNNs.
//!
//! State-transition matrices are products of generalized Householder
//! transformations `I - beta k k^T`, optionally scaled by a scalar gate. The
//! crate contains the recurrence itself (sequential, expanded and chunked
//! evaluation orders), a reverse-mode tape for training, exact hand-built
//! models for group word problems, dataset generators with brute-force
//! oracles, and the training/evaluation/analysis harness behind the
//! `deltaproduct` binary.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod constructions;
pub mod error;
pub mod hh_algebra;
pub mod numerics;
pub mod recurrence;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
