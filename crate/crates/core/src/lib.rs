pub mod cli;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod inference;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
