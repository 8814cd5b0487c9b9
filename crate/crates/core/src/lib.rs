//! Joint semantic and instance segmentation of indoor point clouds through
//! a bird's-eye-view embedding network, graph-based feature propagation and
//! mean-shift grouping.

pub mod bev;
pub mod config;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod net2d;
pub mod net3d;
pub mod numeric;
pub mod pipeline;
pub mod render;
pub mod scene;

pub use error::{Error, Result};
