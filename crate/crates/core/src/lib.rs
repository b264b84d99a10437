//! Hierarchy-aware loss functions for training one segmentation-and-classification
//! network on several datasets whose label sets are different cuts of a shared
//! class tree.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the CLI and the
//! experiment drivers live in the `hiercut` companion crate.
//!
//! Module map:
//!
//! - [`hierarchy`]: class trees, label-set cuts and projection of leaf
//!   probabilities onto a cut.
//! - [`losses`]: plain and cut-aware cross entropy and focal Tversky losses
//!   with analytic gradients.
//! - [`diffnet`]: a small reverse-mode tape, the micro U-Net and Adam.
//! - [`metrics`]: instance matching and panoptic quality.
//! - [`synth`]: deterministic synthetic nucleus patches and augmentation.
//! - [`train`]: episode training with early stopping, and evaluation.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod diffnet;
pub mod hierarchy;
pub mod losses;
mod math;
pub mod metrics;
pub mod seed;
pub mod synth;
pub mod train;

pub use hierarchy::{ClassTree, Fingerprint, HierarchyError, LabelSet, NodeId, NodeSpec};
pub use losses::{CombinedLossParams, LossError, LossKind, LossOutput, ProbField, Target, TargetField, TverskyParams};
pub use metrics::{MaskPair, PqReport};
