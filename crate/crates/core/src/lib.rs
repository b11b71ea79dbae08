//! Weakly supervised multi-modal segmentation from image-level labels.
//!
//! One small convolutional classifier per imaging modality produces class
//! activation maps (CAMs). Training combines image-level cross-entropy with
//! equivariance constraints on the CAMs, both within a modality and across
//! modalities, and mutual distillation between the networks' softmax
//! outputs. The [`evalkit`] module scores the resulting maps against pixel
//! masks.

pub mod error;
pub mod evalkit;
mod io;
pub mod losses;
pub mod model;
pub mod ndgrad;
pub mod synthdata;
pub mod trainloop;
pub mod transforms;

pub use error::{Error, Result};
pub use ndgrad::{DenseArray, Graph, Real, Var};
