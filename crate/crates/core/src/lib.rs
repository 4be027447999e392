pub mod checks;
pub mod cli;
pub mod codec;
pub mod config;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub(crate) mod nn;
pub mod numeric;
pub mod preference;
pub mod sampler;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
