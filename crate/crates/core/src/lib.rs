//! Cross-domain calibration for semantic segmentation.
//!
//! This crate implements a desk-scale pipeline for studying prediction
//! calibration under unsupervised domain adaptation: a self-training
//! student/teacher loop, a meta-learned pixel-wise temperature network
//! trained by bi-level optimization, the post-hoc calibration baselines it
//! is compared against, class-balanced calibration metrics, and a procedural
//! two-domain benchmark to run it all on.

pub mod autodiff;
pub mod calibrators;
pub mod checkpoint;
pub mod dacal;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod mixing;
pub mod models;
pub mod nn;
pub mod self_training;

pub use error::{Error, Result};
