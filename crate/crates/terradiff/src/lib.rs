//! Desk-scale cascaded diffusion for multi-resolution aerial imagery.
//!
//! The stack is organized around a resolution-conditioned denoising
//! diffusion model: a single network is applied recursively, each cascade
//! stage consuming its own prior output as the conditioning image and
//! producing a canvas at N-times finer spatial resolution. Arbitrary-sized
//! canvases are generated through an overlapping sliding window with a
//! constrained initial-noise plan so adjacent windows agree in their
//! shared regions.

pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod degradation;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod imgio;
pub mod nd;
pub mod nn;
pub mod schedule;
pub mod tiler;
pub mod train;

pub use error::{Error, Result};
