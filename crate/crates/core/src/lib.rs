//! Camera localization from detections of pre-selected scene landmarks.
//!
//! The crate covers the geometric side of a landmark-detection localizer:
//!
//! - [`scene`]: pinhole cameras, poses and COLMAP text reconstructions.
//! - [`landmarks`]: greedy selection of salient, well separated landmarks.
//! - [`partition`]: splitting a landmark set into equal groups for detector ensembles.
//! - [`visibility`]: mesh rasterization, occlusion reasoning and depth-to-SfM alignment.
//! - [`detection`]: heatmap labels, peak extraction, detection files and ensemble merging.
//! - [`pose`]: confidence-weighted P3P + PROSAC + nonlinear refinement.
//! - [`evaluation`]: pose error metrics, recall and report tables.
//! - [`synth`]: deterministic synthetic rooms used as test substrate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detection;
pub mod error;
pub mod evaluation;
pub mod landmarks;
pub mod partition;
pub mod pose;
pub mod scene;
pub mod synth;
pub mod visibility;

pub use error::{Error, Result};
