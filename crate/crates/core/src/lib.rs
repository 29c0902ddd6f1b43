//! Pseudo-label propagation along dense motion fields and box fusion for
//! video object detection.

pub mod bplp;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod motion;
pub mod pipeline;
pub mod similarity;
pub mod synth;

pub use error::{Error, Result};
