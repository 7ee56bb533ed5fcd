//! Linear-scaling maritime object detection on CPU.
//!
//! The detector tokenises an image into patches, prunes background tokens
//! with a learned classifier, runs a bidirectional selective state-space
//! backbone and pyramid, and decodes a fixed set of box predictions.

pub mod autodiff;
pub mod bench;
pub mod boxes;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod fpn;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod model;
pub mod ops;
pub mod params;
pub mod pruner;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
