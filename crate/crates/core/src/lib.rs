//! Serverless distributed-training aggregation strategies over simulated,
//! instrumented communication substrates.

pub mod cost;
pub mod error;
mod float_serde;
pub mod harness;
pub mod sgd;
pub mod strategies;
pub mod substrate;

pub use error::{Error, Result};
