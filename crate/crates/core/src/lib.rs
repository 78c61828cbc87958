//! Multi-patch attention network for infrared small target segmentation.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine ([`autodiff`]), the
//! axial and non-local attention layers ([`attention`]), the multi-scale patch network
//! ([`network`]), synthetic data and raster I/O ([`data`]), detection metrics
//! ([`metrics`]) and the training loop ([`training`]).

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod params;
pub mod raster;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
