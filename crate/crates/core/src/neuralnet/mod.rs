//! A small CPU convolutional network: tensors, per-layer forward and
//! backward rules, binary cross-entropy on a single logit, and momentum SGD.

mod gradcheck;
mod layers;
mod model;
mod sgd;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_with, relative_error, BackwardFn, STEP as GRAD_CHECK_STEP};
pub use layers::{
    bce_grad, bce_with_logits, conv2d_backward, conv2d_forward, fc_backward, fc_forward,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, sigmoid, ConvGrads, FcGrads,
};
pub use model::{
    model_backward, model_forward, Architecture, ForwardCache, Gradients, Layer, LayerParams,
    Parameters, INPUT_CHANNELS,
};
pub use sgd::{sgd_step, Sgd};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {layer}: {message}")]
    ShapeChain { layer: usize, message: String },
    #[error("maxpool needs even spatial extents, got {height}x{width}")]
    OddSpatial { height: usize, width: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("activation cache does not match this model: {0}")]
    StaleCache(String),
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("{0}")]
    Hyperparameter(String),
}
