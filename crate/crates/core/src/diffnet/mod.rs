//! Reverse-mode differentiation for a fixed set of image operations, the
//! micro U-Net built on it, and the Adam optimizer.

mod adam;
mod ops;
mod param;
mod tape;
mod tensor;
mod unet;

pub use adam::{AdamConfig, AdamState};
pub use param::{Param, ParamStore};
pub use tape::{NodeGrads, Tape, Var};
pub use tensor::Tensor;
pub use unet::{MicroUNet, UNetConfig};

use alloc::string::String;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("patch is {height}x{width}; both sides must be positive multiples of 4")]
    PatchSize { height: usize, width: usize },
    #[error("expected {expected} input channels, got {found}")]
    InputChannels { expected: usize, found: usize },
    #[error("shape mismatch: expected {expected:?}, got {found:?}")]
    Shape { expected: [usize; 3], found: [usize; 3] },
    #[error("gradient for parameter {name} contains a non-finite value")]
    NonFiniteGradient { name: String },
    #[error("parameter layout does not match the network configuration")]
    ParamLayout,
    #[error("invalid network configuration: {0}")]
    Config(String),
}
