//! Tabular incremental inference: adapt a classifier trained on a fixed column
//! set so it can use columns that only appear at inference time, without
//! inference labels, plus the mutual-information diagnostics used to check it.

pub mod adaptation;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod isc;
pub mod mine;
pub mod placeholders;
pub mod rng;
pub mod synthetic;
pub mod tensor;

pub use error::{Result, TabiiError};
