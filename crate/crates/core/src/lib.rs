// Negated comparisons are how config validation rejects NaN along with
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cells;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gradients;
pub mod linalg;
pub mod network;
pub mod training;

pub use error::{Error, Result};
