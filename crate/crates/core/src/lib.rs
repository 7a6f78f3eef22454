pub mod archive;
pub mod config;
pub mod correspondence;
pub mod denoiser;
pub mod energy;
pub mod error;
pub mod inversion;
pub mod metrics;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
