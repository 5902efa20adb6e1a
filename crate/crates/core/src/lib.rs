pub mod baselines;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod labelset;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};
