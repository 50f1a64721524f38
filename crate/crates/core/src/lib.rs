//! Discrete adversarial training at desk scale.
//!
//! An image discretizer (convolutional encoder, nearest-entry codebook,
//! convolutional decoder) is trained first and then frozen. Classifiers are
//! trained on `Q(x + δ)`, where `δ` is a single gradient step taken on the
//! discretized image and carried back through a straight-through shortcut.

pub mod analysis;
pub mod checkpoint;
pub mod classifier;
pub mod codebook;
pub mod config;
pub mod data;
pub mod discretizer;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod run;
pub mod trainer;

pub use error::{DatError, Result};
