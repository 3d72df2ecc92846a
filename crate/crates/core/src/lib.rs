//! Meta-learning across stochastic linear bandit tasks.
//!
//! Biased OFUL runs each task with a ridge penalty pulled toward a bias
//! vector `h`; the meta layer estimates `h` from previous tasks, either by
//! averaging per-task estimates or by one ridge regression over all of them.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandit;
pub mod bench;
pub mod cli;
pub mod data;
pub mod env;
pub mod error;
pub mod linalg;
pub mod meta;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::{RealVector, SymMatrix};
