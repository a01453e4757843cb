//! Differentiable layers, losses, the Adamax optimizer and a finite-difference
//! gradient checker.
//!
//! Every layer is generic over [`Real`](crate::tensor::Real) so the same code
//! runs in `f32` for training and in `f64` for gradient verification.

mod adamax;
mod gradcheck;
mod layers;
mod loss;
mod ops;
mod regularization;

pub use adamax::{adamax_step, AdamaxConfig, AdamaxState};
pub use gradcheck::{check_softmax_cross_entropy, gradient_check, gradient_suite, GradCheckReport, SuiteCase};
pub use layers::{BatchNorm, Conv2d, Dense, Dropout, GlobalMaxPool, Layer, LayerGradients, MaxPool2d, Relu};
pub use loss::{categorical_cross_entropy, one_hot, softmax, softmax_cross_entropy_grad, LOG_FLOOR};
pub use ops::{
    batchnorm_forward, conv2d_forward, dense_forward, dropout, global_max_pool, maxpool2d, relu, BatchNormParams,
};
pub use regularization::{l1_l2_penalty, RegularizationConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Dimension { op: &'static str, message: String },
    #[error("batch normalization in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("dropout rate must be in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("target row {row} is not a one-hot vector")]
    InvalidTarget { row: usize },
    #[error("probability row {row} sums to {sum}, expected 1")]
    InvalidProbabilities { row: usize, sum: f64 },
    #[error("{0}: backward called before forward")]
    NoForwardCache(&'static str),
}
