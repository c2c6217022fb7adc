//! Test-time calibration of panoramic depth predictors.
//!
//! The crate is `no_std` (with `alloc`). It covers equirectangular geometry,
//! the stretch and warp operators, the self-consistency losses, a procedural
//! ray-cast scene generator used as ground truth, calibration loops, and the
//! two downstream harnesses: occupancy-grid SLAM and map-free localization.
//!
//! Frame conventions used throughout:
//! - pixel `(u, v)` has longitude `2π(u+0.5)/W − π` and colatitude `π(v+0.5)/H`
//!   measured from `+z`;
//! - a [`Pose`] `(R, t)` places a child camera in its parent frame, so a
//!   parent point `p` has child coordinates `Rᵀ(p − t)`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod calibration;
pub mod error;
pub mod geometry;
pub mod kdtree;
pub mod localization;
pub mod losses;
pub mod mapping;
pub mod metrics;
pub mod predictor;
pub mod rng;
pub mod scene;
pub mod stretch;
pub mod synthesis;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use geometry::{Capture, DepthMap, Panorama, PointCloud, Pose, SphereDir};
pub use predictor::DepthPredictor;
