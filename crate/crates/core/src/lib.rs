//! Distance-map-regularized multi-task segmentation at desk scale.
//!
//! The crate provides everything needed to train and evaluate small
//! encoder-decoder segmentation networks with an auxiliary signed-distance-map
//! regression decoder: a reverse-mode autograd engine, exact Euclidean
//! distance transforms, three network variants, an uncertainty-weighted joint
//! loss, an RMSProp training loop, NIfTI-1 volume I/O with preprocessing and
//! synthetic phantom generation, and a full segmentation metrics suite.

pub mod dataio;
pub mod distmap;
pub mod error;
pub mod metrics;
pub mod mtl;
pub mod networks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
