//! Stylized novel-view synthesis in three stages: a 2D AdaIN stylizer, a
//! radiance field fitted to the scene, and style-conditioned heads trained on
//! top of the frozen radiance-field trunk.

// `!(a < b)` is how NaN inputs are rejected throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adain;
pub mod data;
pub mod error;
pub mod multistyle;
pub mod nerf;
pub mod nn;
pub mod progress;
pub mod rendering;

pub use error::{Error, Result};
