pub mod bench;
pub mod cli;
pub mod data;
pub mod diffusion;
pub mod eigen;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
