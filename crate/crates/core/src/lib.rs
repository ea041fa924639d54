//! Differentiable level-set active contours with per-pixel energy
//! parameters, a minimal trainable parameter-map predictor, and a
//! segmentation metric suite.

pub mod acm;
pub mod autodiff;
pub mod error;
pub mod fields;
pub mod io;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod ops;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use fields::{Axis, Grid, PadMode};
