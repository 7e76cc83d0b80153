//! Blind quality assessment of 3D volumes with a content-adaptive
//! hyper-network.

#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
