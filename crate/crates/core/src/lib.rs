//! Longitudinal lesion tracking evaluation: VOI extraction around (possibly
//! mispropagated) lesion centroids, pluggable segmentation, center-proximity
//! correspondence, outcome classification, and the displacement sweep.

pub mod config;
pub mod correspondence;
pub mod error;
pub mod experiments;
pub mod labeling;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod report;
pub mod rng;
pub mod segmenter;
pub mod shapes;
pub mod voi;
pub mod volume;

pub use error::{Error, Result};
