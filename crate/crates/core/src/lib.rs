//! Vision-language pre-training for volumetric scans and their reports:
//! sentence-aware text encoding, a hierarchical 3D windowed-attention vision
//! encoder, hierarchical contrastive alignment, uni-modal self-supervision,
//! and multi-modal matching.

pub mod error;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod report_prep;
pub mod tribert;
pub mod vision;

pub use error::{Result, VelvetError};
