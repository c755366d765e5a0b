// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod dual;
pub mod error;
pub mod hamiltonian;
pub mod model;
pub mod oracle;
pub mod residual;
pub mod solver;
pub mod tolerance;

pub use error::{Error, Result};
