//! Flipped, Direct and Channel meta-training for small encoder-decoder
//! models, with the scoring rules and evaluation harness to compare them.

pub mod config;
pub mod error;
pub mod eval;
pub mod inference;
pub mod objectives;
pub mod rendering;
pub mod seq_model;
pub mod task_schema;

pub use error::{Error, Result};
