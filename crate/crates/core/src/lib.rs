// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Attachment-structured Bayesian neural networks: a deterministic backbone
//! with small Gaussian variational modules, trained against ID and OOD data,
//! plus the metrics and numerical checks that go with it.

pub mod cli;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod theory;
pub mod training;

pub use error::{AbnnError, IdxError, Result};
