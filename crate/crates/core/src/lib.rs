//! Metric learning with quadruplet, triplet and contrastive objectives on
//! small fully connected networks, with deterministic training, CMC
//! evaluation and numerical gradient checks.

// `!(x >= 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod equivalence;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod quadruplets;
pub mod run;
pub mod train;

pub use error::{Error, Result};
