//! Dynamic architecture skipping: learn which residual blocks of a frozen
//! network can be replaced by small adapters, using a bandit search.

pub mod bandit;
pub mod cli;
pub mod data;
pub mod error;
pub mod manifest;
pub mod network;
pub mod pipeline;
pub mod planted;
pub mod tensor;

pub use error::{DasError, Result};
