//! Geometry and rendering pipeline for video-based head reenactment.
//!
//! The crate is organised around two halves:
//!
//! * a **geometry path**: a linear 3D morphable face model ([`model`]), scaled
//!   orthographic cameras ([`camera`]), a box-constrained least-squares video
//!   fitter ([`fitter`]), a software rasterizer producing normalised mean-face
//!   coordinate (NMFC) conditioning images ([`raster`]) and source-to-target
//!   parameter transfer ([`reenact`]);
//! * a **toy neural-rendering kernel**: a small reverse-mode autodiff engine
//!   over dense `f64` tensors ([`tensor`]) and the GAN losses, networks and
//!   training loops built on top of it ([`gan`]).
//!
//! Geometry-path math is generic over the scalar type through the [`Real`]
//! trait (`f32` or `f64`); concrete aliases live at the crate root. The tensor
//! kernel is `f64` only, since finite-difference gradient checks are its
//! correctness backbone.

pub mod camera;
pub mod data;
pub mod error;
pub mod fitter;
pub mod gan;
pub mod model;
pub mod raster;
pub mod reenact;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ShapeBasis64 = model::ShapeBasis<f64>;
pub type ShapeParams64 = model::ShapeParams<f64>;
pub type Mesh64 = model::Mesh<f64>;
pub type SopCamera64 = camera::SopCamera<f64>;
pub type Landmarks64 = camera::Landmarks2D<f64>;
pub type FitResult64 = fitter::FitResult<f64>;
pub type NmfcImage64 = raster::NmfcImage<f64>;
