//! Reverse-mode automatic differentiation over dense `f64` NCHW tensors.
//!
//! The op set is exactly what the segmentation networks need: strided and
//! padded 2-D convolution, batch norm, ReLU, sigmoid, addition, channel
//! broadcast gating, max pooling, bilinear ×2 upsampling and channel
//! concatenation. Objectives are evaluated outside the graph and enter the
//! backward sweep as a seed gradient.

mod graph;
mod kernels;
pub mod optim;
pub mod params;
mod tensor;

pub use graph::{BnParams, Gradients, Graph, Mode, Var};
pub use optim::Adam;
pub use params::{BnUpdate, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

/// Incompatible tensor shapes or op arguments.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape error: {0}")]
pub struct ShapeError(pub String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        ShapeError(msg.into())
    }
}
