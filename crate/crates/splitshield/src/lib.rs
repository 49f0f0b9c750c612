//! Privacy toolkit for edge-cloud split inference.
//!
//! An edge device runs the head and classifier of a split network, a cloud
//! server runs the encoder in the middle, and only intermediate activations
//! cross the boundary. This crate implements leakage-regularized training
//! that limits how much those activations reveal about the device's inputs
//! and labels, the attacks such a deployment faces, simple noise/compression
//! baselines, certified leakage bounds on synthetic worlds, and a harness to
//! reproduce the accuracy/robustness trade-off curves.

pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
