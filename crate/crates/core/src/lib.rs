//! Temporal 6D object-pose estimation at desk scale: a causal video decoder
//! with pose-regression and future-feature heads, trained end to end with a
//! four-term loss, plus the ADD/ADD-S evaluation stack and a synthetic video
//! generator standing in for the visual backbone.

pub mod data;
pub mod diffgeom;
pub mod error;
pub mod geom;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod serialize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
