//! Vehicle counting for overhead and satellite imagery.
//!
//! The pipeline cuts each scene into overlapping tiles, runs a pluggable
//! detector per tile, maps detections back into the scene frame, removes
//! duplicates created by tile overlap, counts vehicles per area of interest
//! and reports year-over-year change per location.
//!
//! Geometry, detections, merging and evaluation are generic over [`Scalar`]
//! (`f32` or `f64`). The aliases below fix the scalar for callers that do not
//! care; the rest of the pipeline (ingestion, analytics, CLI) runs on `f64`.

pub mod analytics;
pub mod cli;
pub mod detection;
pub mod evaluation;
pub mod geometry;
pub mod ingestion;
pub mod merger;
pub mod scalar;
pub mod tiler;

pub use scalar::Scalar;

pub type PixelBoxF64 = geometry::PixelBox<f64>;
pub type PixelBoxF32 = geometry::PixelBox<f32>;
pub type PointF64 = geometry::Point<f64>;
pub type PointF32 = geometry::Point<f32>;
pub type GeoTransformF64 = geometry::GeoTransform<f64>;
pub type GeoTransformF32 = geometry::GeoTransform<f32>;
pub type AoiPolygonF64 = geometry::AoiPolygon<f64>;
pub type AoiPolygonF32 = geometry::AoiPolygon<f32>;
pub type DetectionF64 = detection::Detection<f64>;
pub type DetectionF32 = detection::Detection<f32>;
