pub mod archive;
pub mod backend;
pub mod cache;
pub mod deviation;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod image;
pub mod inversion;
pub mod latent;
pub mod masking;
pub mod matching;
pub mod pipeline;
mod resample;
pub(crate) mod rng;
pub mod schedule;
pub mod transfer;

pub use error::{Error, Result};
