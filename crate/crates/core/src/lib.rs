//! Segment-level transformer language modeling with a configurable external
//! memory: one attention routine and one set of memory knobs cover cached-state,
//! recurrent-token, sparse-attention and retrieval-style long-context models.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod mask;
pub mod memory;
pub mod model;
pub mod presets;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::MaskMatrix;
pub use tensor::Tensor;
