pub mod autograd;
pub mod calibrate;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
