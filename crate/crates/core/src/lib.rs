pub mod cli;
pub mod envs;
pub mod error;
pub mod gac;
pub mod gradvec;
pub mod grpo;
pub mod pipeline;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
