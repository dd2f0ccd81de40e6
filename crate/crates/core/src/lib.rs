//! Class-incremental object detection.
//!
//! A compact two-stage detector (backbone stem and extractor, anchor RPN, RoI
//! box head) trained over b-n incremental scenarios with naive fine-tuning,
//! ILOD, Faster-ILOD, or Dynamic Y-KD, plus joint training as an upper bound.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the concrete instantiations used by the tools and tests.

pub mod branch;
pub mod dataset;
pub mod detector;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision detector used for training runs.
pub type Detector32 = detector::Detector<f32>;
/// Double-precision detector used for gradient checks.
pub type Detector64 = detector::Detector<f64>;
pub type Box32 = geometry::BoundingBox<f32>;
pub type Box64 = geometry::BoundingBox<f64>;
pub type Detection32 = geometry::Detection<f32>;
pub type Detection64 = geometry::Detection<f64>;
pub type FeatureMap32 = tensor::FeatureMap<f32>;
pub type FeatureMap64 = tensor::FeatureMap<f64>;
