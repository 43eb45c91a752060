//! Arbitrary-scale image super-resolution with a wavelet-enhanced local
//! implicit attention model.
//!
//! The pipeline: a residual convolutional encoder lifts an RGB image to a
//! feature map, a single-level Haar transform splits the features into a
//! low-frequency band and three high-frequency bands, a residual enhancement
//! network fuses the bands, and a local cross-scale attention head decodes
//! RGB values at arbitrary continuous query coordinates. Training, metrics,
//! and a small CLI live in their own modules.
//!
//! Everything runs on a self-contained reverse-mode autodiff engine
//! ([`tensor`]) that is generic over `f32`/`f64`; `f32` is the working
//! precision and `f64` backs the finite-difference gradient checks.

pub mod checkpoint;
pub mod config;
pub mod coords;
pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use tensor::{Scalar, Tensor};
