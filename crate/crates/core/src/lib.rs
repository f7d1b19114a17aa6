pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod importance;
pub mod nn;
pub mod pipeline;
pub mod pos;
pub mod schedule;
pub mod strategy;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
