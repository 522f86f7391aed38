//! Sparse conditional hidden Markov label model for weakly supervised
//! sequence labeling.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod emission;
pub mod error;
pub mod eval;
pub mod hmm;
pub mod model;
pub mod nn;
pub mod synth;
pub mod trainer;
pub mod transition;

pub use error::{Error, Result};
