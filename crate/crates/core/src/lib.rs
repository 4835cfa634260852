//! Monte Carlo Picard solver for backward SDEs whose generator depends on
//! the recent past of the solution through a delay measure.

// `!(x < y)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde_model;
pub mod cli;
pub mod constants;
pub mod delay_measure;
pub mod error;
pub mod estimates_validator;
pub mod path_engine;
pub mod picard_solver;

pub use error::{Error, Result};
