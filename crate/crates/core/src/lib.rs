//! Risk- and intent-aware selective feature sharing between a roadside sensor
//! and a vehicle on a bird's-eye-view occupancy grid.
//!
//! The numerical kernels are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix them at `f64` for pipeline use.

// negated float comparisons are how NaN parameters get rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod comm;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod idapm;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod ptcm;
pub mod scalar;
pub mod scenario;
pub mod sensing;

pub use error::{Error, Result};
pub use grid::{CellIndex, CellMask, Grid, GridSpec, Heatmap, OccupancyGrid};
pub use pipeline::{run, MaskPolicy, RunConfig, RunOutput};
pub use scalar::Scalar;
pub use scenario::{Scenario, Template};

pub type Point2d = geometry::Point2<f64>;
pub type Point2f = geometry::Point2<f32>;
pub type Transform2d = geometry::RigidTransform2D<f64>;
pub type Transform2f = geometry::RigidTransform2D<f32>;
pub type HeatmapPredictor = idapm::Predictor<f64>;
pub type HeatmapPredictorF32 = idapm::Predictor<f32>;
pub type DefaultPtcmParams = ptcm::PtcmParams<f64>;
pub type DefaultLossParams = loss::LossParams<f64>;
