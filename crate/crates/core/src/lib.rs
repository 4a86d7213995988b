//! Uncertainty-aware closed-set eye segmentation.
//!
//! The pipeline crops the eye region out of a camera frame, segments the crop
//! into background / eye / iris / pupil with a small convolutional network,
//! and attaches a per-pixel diagonal covariance head whose log-determinant
//! summed over the crop gives an image-level uncertainty score.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod labels;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod segnet;
pub mod synthgen;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{ParamSet, Tensor};
