//! Differentiable numeric primitives.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::Padding;
pub use layers::{conv2d, inverted_residual, prelu, resize_bilinear, softmax_lastdim, ConvParams, InvertedResidualParams};
pub use params::{Ctx, Init, ParamSet, SpecList};
