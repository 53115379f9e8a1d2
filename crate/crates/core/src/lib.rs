//! Relation-map, pixel-wise and adversarial distillation for semantic segmentation.

pub mod adversarial;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod models;
pub mod relation;

pub use error::{Error, Result};
