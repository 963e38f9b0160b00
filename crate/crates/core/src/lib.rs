//! Bi-modal place recognition from a camera and a LiDAR.
//!
//! The pipeline builds a dense elevation map around the sensor, renders it as
//! an 8-bit image, projects camera features into the same bird-eye-view grid,
//! fuses both streams into one feature map, and aggregates it with NetVLAD
//! into a unit-norm global descriptor. Descriptors are trained with a lazy
//! quadruplet loss and evaluated by nearest-neighbour retrieval.

pub mod commands;
pub mod config;
pub mod elevation;
pub mod error;
pub mod geometry;
pub mod network;
pub mod nn;
pub mod prepare;
pub mod projection;
pub mod retrieval;
pub mod synth;
pub mod training;

pub use error::{CoralError, Result};
