//! Guided deep metric learning.

pub mod baseline;
pub mod data;
pub mod distill;
pub mod embedding;
pub mod error;
pub mod gemini;
pub mod metrics;
pub mod numerics;
pub mod persist;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
