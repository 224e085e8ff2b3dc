//! FaCTR: patch-based temporal attention with factorization-machine channel
//! mixing for multivariate forecasting.

pub mod data;
pub mod eval;
pub mod model;
pub mod train;
mod error;

pub use error::{Error, Result};
