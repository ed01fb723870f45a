//! Hybrid CNN + CRF stereo matching.
//!
//! A shared-weight convolutional network extracts per-pixel features from
//! both images of a rectified pair; softmax-normalized feature correlation
//! yields a matching probability volume; a 4-connected CRF with a truncated
//! `P1`/`P2` penalty on contrast-sensitive or learned edge weights is solved
//! by dual decomposition into row and column chains. Training covers
//! pixel-wise cross-entropy and structured-SVM joint learning through the
//! fixed-iteration inference.

pub mod checkpoint;
pub mod cli;
pub mod conv;
pub mod correlation;
pub mod crf;
pub mod error;
pub mod eval;
pub mod pairwise;
pub mod stereo_io;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
