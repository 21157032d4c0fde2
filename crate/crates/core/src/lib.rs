//! Probabilistic cell detection on 3D density maps.
//!
//! The crate covers the full path from annotations to spatial statistics:
//! ground-truth density maps ([`densitymap`]), large-volume tiling
//! ([`volume::tiling`]), non-maximum suppression ([`detect`]), proposal features
//! ([`features`]), probabilistic classifiers ([`classifier`]), matching and
//! calibration scores ([`evalmetrics`]), regression losses and Monte-Carlo
//! aggregation ([`bayescore`]), and distance-based spatial analysis
//! ([`spatial`]). [`synth`] provides synthetic scenes and a surrogate
//! regressor so every stage can run without a trained network.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bayescore;
pub mod classifier;
pub mod cli;
pub mod coords;
pub mod densitymap;
pub mod detect;
pub mod error;
pub mod evalmetrics;
pub mod features;
pub mod pipeline;
pub mod spatial;
pub mod synth;
pub mod volume;

pub use coords::CoordSet;
pub use error::{Error, Result};
pub use volume::Volume3D;
