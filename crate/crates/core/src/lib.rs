//! Aggregated landmark detection over geometrically manipulated faces.
//!
//! A face is warped K times by thin-plate-spline perturbations of its
//! landmark control points (adversarial against an identity embedding, or
//! sampled per semantic group). A shared heatmap detector runs on each
//! variant, predictions are mapped back through the inverse warp, and the
//! branches are fused with displacement-normalized weights.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod imaging;
pub mod landmarks;
pub mod tps;
pub mod embedder;
pub mod attack;
pub mod groups;
pub mod detector;
pub mod aggregate;
pub mod pipeline;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use imaging::{Image, NormalizedPoint};
pub use landmarks::LandmarkSet;
pub use tps::{DisplacementField, TpsTransform};
