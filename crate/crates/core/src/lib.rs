//! Few-shot relation classification with large-margin prototypical networks.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
