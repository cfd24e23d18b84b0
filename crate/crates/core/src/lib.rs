//! Adaptive-weighting multi-field-of-view segmentation.
//!
//! Three expert encoder-decoder networks see the same target region at
//! three magnifications; a weighting network scores how much to trust each
//! expert for a given input, and an aggregating network fuses the
//! weight-scaled expert heat maps into the final per-pixel class map.

pub mod error;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod pyramid;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
