//! Patch-wise spatiotemporal grid forecasting with a convolutional selective
//! state-space core and a surprise-driven persistent spatial memory.

pub mod data;
pub mod error;
pub mod eval;
pub mod memory;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
