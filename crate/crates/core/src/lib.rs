pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod grpo;
pub mod image;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod seed;
pub mod sft;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
