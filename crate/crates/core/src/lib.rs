//! Core of the IDC patch classifier: a from-scratch convolutional training
//! engine, the patch data pipeline, the classifier with checkpointing, and
//! classification metrics.

pub mod nn;
pub mod tensor;

pub use tensor::{Real, Tensor};
pub mod data;
pub mod metrics;
pub mod model;
