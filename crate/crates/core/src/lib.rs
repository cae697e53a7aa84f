pub mod audio_model;
pub mod augment;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod text_model;
pub mod topics;

pub use error::{Error, Result};
