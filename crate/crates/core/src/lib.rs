//! Temporal-attention video foreground segmentation: the MUSTAN1 / MUSTAN2
//! networks, their loss and metrics, a clip-based data pipeline, a synthetic
//! scene generator and the training and evaluation driver.

pub mod archive;
pub mod dataio;
mod error;
pub mod metrics;
pub mod models;
pub mod nnblocks;
pub mod objective;
pub mod toygen;
pub mod trainer;

pub use error::{Error, Result};
pub use mustan_autograd::Tensor;
