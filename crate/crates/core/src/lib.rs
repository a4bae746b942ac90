//! Threshold-guided alignment of tabular generative policies from unpaired
//! scalar feedback.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod commands;
pub mod config;
pub mod env;
pub mod error;
pub mod feedback;
pub mod matrix;
pub mod numeric;
pub mod objective;
pub mod policy;
pub mod report;
pub mod rng;
pub mod textfmt;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use matrix::Matrix;
