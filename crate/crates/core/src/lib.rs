//! Relative depth estimation from an RGB image and a dual-pixel (DP) image pair.
//!
//! The crate bundles a small reverse-mode differentiation engine, the windowed
//! bidirectional parallax attention used by the DP encoder, the full
//! encoder/fusion/decoder network, affine-invariant losses and metrics, a
//! synthetic DP data simulator, and the staged training driver.

pub mod cli;
pub mod dpsim;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;
pub mod wbipam;

pub use error::{Error, Result};
pub use tensor::TensorMap;
