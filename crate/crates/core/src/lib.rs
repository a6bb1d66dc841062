//! Conformal training: differentiable conformity-score losses, a small
//! autodiff engine, and the experiment pipeline built on them.

pub mod conformal;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod rng;
pub mod soft;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
