//! Fog-robust detection transformers at desk scale: a tape-based autodiff
//! engine, a synthetic fog generator, attention variants conditioned on a fog
//! stream, a small DETR-style detector, distillation, and mAP@50 evaluation.

pub mod attention;
pub mod autodiff;
pub mod boxes;
pub mod detector;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod fogsim;
pub mod harness;
pub mod optim;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
