//! Image smoothing with the truncated Huber penalty.
//!
//! One non-convex, non-smooth objective covers edge-preserving smoothing,
//! edge-sharpening smoothing, guided filtering and structure-preserving
//! (texture removing) smoothing. Which behaviour you get is decided purely by
//! the parameters, see [`pipeline::Preset`].
//!
//! The minimizer alternates closed-form updates of two auxiliary fields with a
//! sparse symmetric positive-definite solve, and every step of that descent can
//! be audited at run time through [`energy`].

pub mod cli;
pub mod direct;
pub mod energy;
pub mod error;
pub mod fields;
pub mod grid;
pub mod guidance;
pub mod io;
pub mod penalty;
pub mod pipeline;
pub mod solver;
pub mod tasks;

pub use error::{Error, Result};
pub use grid::{Extent, ImageGrid, SmoothingParams};
pub use pipeline::{preset, smooth, Preset, PresetOverrides, SmoothOptions, SmoothOutput};
