//! Scale-wise dynamic-depth autoregressive image token generation.
//!
//! One weight-shared transformer serves every subnet: coarse scales (the
//! bridge zone) always run all layers, fine scales run an equidistant
//! subset. See the crate README for the command-line tool built on top.

pub mod data;
pub mod depth;
pub mod error;
pub mod model;
pub mod perf;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
