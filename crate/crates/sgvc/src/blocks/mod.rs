//! Neural building blocks of the codec.
//!
//! All operations here are pure functions of (input, params) over (H, W, C)
//! feature maps and are safe to call concurrently as long as the parameters
//! are not mutated underneath them.

pub mod act;
pub mod conv;
pub mod linear;
pub mod rcab;
pub mod sffm;
pub mod sgu;
pub mod ssn;

use ndarray::Array3;

/// Real-valued (H, W, C) map flowing through the transforms.
pub type FeatureMap = Array3<f32>;
/// Per-pixel, per-channel gating weights, strictly inside (0, 1).
pub type ImportanceMask = Array3<f32>;
/// Channel-aggregated importance, shape (H, W, 1).
pub type SpatialImportanceMap = Array3<f32>;
/// A tradeoff value tiled over space, shape (H, W, 1).
pub type RdMap = Array3<f32>;
/// Strictly positive per-pixel scale factors, shape (H, W, 1).
pub type ScaleFactorMap = Array3<f32>;

pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;
pub use rcab::{rcab_forward, RcabParams};
pub use sffm::{sffm_forward, SffmParams};
pub use sgu::{sgu_forward, SguParams};
pub use ssn::{aggregate_mask, apply_scale, build_rd_map, ssn_forward, SsnParams};
