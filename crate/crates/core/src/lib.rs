pub mod cli;
pub mod dataset;
pub mod decompose;
pub mod error;
pub mod lm;
pub mod neuralnet;
pub mod pulsesim;
pub mod su2;
pub mod supcode;

pub use error::{Error, Result};
