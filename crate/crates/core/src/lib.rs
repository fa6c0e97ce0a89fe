pub mod analysis;
pub mod cli;
pub mod error;
pub mod latent;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
