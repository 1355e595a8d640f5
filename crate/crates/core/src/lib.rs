pub mod codebook;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod explain;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod plot;
pub mod registry;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
