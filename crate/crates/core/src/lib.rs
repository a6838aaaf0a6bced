//! Desk-scale human-robot semantic alignment of a frozen video encoder.
//!
//! A small convolutional backbone is pre-trained on synthetic human clips,
//! frozen, and then adapted to robot clips with residual bottleneck
//! adapters trained under a symmetric human-robot contrastive loss over
//! paired demonstrations.

pub mod adapter;
pub mod alignment;
pub mod cli;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod task_query;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
