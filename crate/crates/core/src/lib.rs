//! Occluded pedestrian detection by visible-region detection followed by
//! full-body estimation.

pub mod data;
pub mod epm;
pub mod eval;
pub mod error;
pub mod fen;
pub mod geometry;
pub mod netcore;
pub mod pipeline;
pub mod postprocess;
pub mod vdn;

pub use error::{Error, Result};
pub use geometry::{BBox, ImageBounds, OffsetVector};
