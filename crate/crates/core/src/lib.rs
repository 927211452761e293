//! Self-supervised dual-zoom reference super-resolution.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod degradation;
pub mod error;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod restoration;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
