//! Keypoint-based image registration: differentiable keypoint extraction from
//! feature fields, closed-form point-set alignment, resampling, and the
//! training and evaluation harness around them.

pub mod align;
pub mod autodiff;
pub mod error;
pub mod field;
pub mod harness;
pub mod keypoints;
pub mod model;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
