//! Attentional multi-reading (AMR) sarcasm detection.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod seed;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
