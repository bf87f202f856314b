//! Simulator of sensor-fusion data delivery over V2X sidelinks at an
//! occluded urban intersection.
//!
//! The crate composes five layers: [`geometry`] primitives, the
//! [`scenario`] world and its mobility, the [`propagation`] link model, the
//! perception-matrix fusion trigger in [`apm`], the relay policies in
//! [`relay`], and the [`engine`] that runs them together. [`config`] loads
//! the flat scenario file.

pub mod apm;
pub mod config;
pub mod engine;
pub mod geometry;
pub mod propagation;
pub mod relay;
pub mod scenario;
