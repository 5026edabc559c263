//! Template learning and template matching on ℝ² and the roto-translation
//! group SE(2).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bspline;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod geometry;
pub mod lifting;
pub mod linalg;
pub mod matching;
pub mod pipeline;
pub mod quadrature;
pub mod regression;
pub mod regularizers;

pub use bspline::{Domain, Loss, SamplingMatrix, SplineGrid, SplineTemplate};
pub use error::{Error, Result};
pub use geometry::{left_invariant_frame, LeftInvariantFrame, Se2Element};
