//! Multi-view consistent semantic segmentation for RGB-D sequences.
//!
//! Geometry warps per-pixel predictions and feature maps between calibrated
//! views; fusion combines them in a keyframe (Bayesian product of class
//! likelihoods, or max-pooling of features); a small two-branch
//! encoder-decoder is trained with multi-scale supervision and one of three
//! multi-view consistency losses; metrics score the result. A synthetic
//! scene renderer provides exact depth and labels for checking all of it.

pub mod error;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod learning;
pub mod metrics;
pub mod synth;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{Label, LabelMap, Mask, Shape, Tensor, IGNORE};
