//! Quantization-aware training with content-aware fake quantization,
//! distance-aware gradient modulation and per-layer dynamic bit-width
//! selection, exercised on a small learned image codec.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod quant;
pub mod selector;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
