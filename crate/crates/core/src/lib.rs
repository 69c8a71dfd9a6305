//! Numerics for scale-and-shift-invariant and scale-invariant monocular depth:
//! closed-form alignment, SSI and sparse ordinal losses with analytic
//! gradients, depth geometry, evaluation metrics, a procedural scene
//! generator, and a small convolutional trainer.

pub mod align;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod sampling;
pub mod synth;
pub mod toy_model;
pub mod training;

pub use error::{Error, Result};
pub use grid::{CameraIntrinsics, MultiGrid, NormalGrid, PointCloud, ScalarGrid, ValidMask};
