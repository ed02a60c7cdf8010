//! Restarted low-rank training (ReLoRA) of small decoder-only language
//! models, with full-rank, control and plain low-rank baselines and the
//! singular-value analysis of the resulting weight updates.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod lora;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
