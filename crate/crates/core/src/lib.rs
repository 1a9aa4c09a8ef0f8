//! LeGrad explainability for Vision Transformers.
//!
//! The crate holds the tensor kernels, the `.lgtc` tensor container, a ViT
//! forward pass that records every intermediate, the attention-gradient
//! explainer with its baselines, the evaluation metrics, and the seeded
//! tiny-model generator used by the test suites.

pub mod error;
pub mod eval;
pub mod explain;
pub mod fixtures;
pub mod imaging;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
