pub mod channel;
pub mod cli;
pub mod entropy;
pub mod error;
pub mod predict;
pub mod protocol;
pub mod quantizer;
pub mod rng;

pub use error::{Error, Result};
