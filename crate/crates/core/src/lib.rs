pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod curation;
pub mod error;
pub mod fusion;
pub mod lstm;
pub mod metrics;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
