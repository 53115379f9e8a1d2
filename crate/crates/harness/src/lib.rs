//! Experiment harness: configuration, training and distillation loops,
//! evaluation, artifacts and plots.

pub mod artifacts;
pub mod config;
pub mod evaluate;
pub mod report;
pub mod train;
