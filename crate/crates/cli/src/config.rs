//! Layered run configuration: built-in defaults, then an optional TOML
//! file, then command-line flags.

use std::path::Path;

use serde::Deserialize;
use toml::{Table, Value};

use sceneloc::detection::{ConfidenceModel, SimulationParams};
use sceneloc::landmarks::SelectionParams;
use sceneloc::partition::Criterion;
use sceneloc::pose::{Refinement, SamplingStrategy, SolverConfig};
use sceneloc::scene::Intrinsics;
use sceneloc::synth::SynthConfig;
use sceneloc::visibility::{VisibilityParams, VisibilityTolerances};

use crate::CliError;

pub const DEFAULT_CONFIG: &str = include_str!("../../../config/default.toml");

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub select: SelectSection,
    pub partition: PartitionSection,
    pub visibility: VisibilitySection,
    pub simulate: SimulateSection,
    pub localize: LocalizeSection,
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsSection {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub room: [f64; 3],
    pub landmark_sites: usize,
    pub occluders: usize,
    pub occluder_footprint: [f64; 2],
    pub occluder_height: [f64; 2],
    pub cameras: usize,
    pub camera_height: [f64; 2],
    pub camera_wall_clearance: f64,
    pub min_visible_landmarks: usize,
    pub intrinsics: IntrinsicsSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    pub count: usize,
    pub initial_radius: f64,
    pub min_track: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub criterion: String,
    pub groups: usize,
    pub kmeans_max_iter: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilitySection {
    pub depth_abs: f64,
    pub depth_rel: f64,
    pub normal_deg: f64,
    pub max_surface_distance: f64,
    pub decimation: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub noise_sigma_px: f64,
    pub outlier_rate: f64,
    pub min_outlier_offset_px: f64,
    pub inlier_confidence_scale: f64,
    pub inlier_confidence_floor: f64,
    pub outlier_confidence: [f64; 2],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizeSection {
    pub weight_exp: f64,
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub refinement: String,
    pub weighted_scoring: bool,
    pub sampling: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub rotation_deg: f64,
    pub position_m: f64,
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl RunConfig {
    /// Built-in defaults overlaid with `path`, if given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut table: Table = DEFAULT_CONFIG.parse().expect("built-in config parses");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
            let user: Table = text
                .parse()
                .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
            merge(&mut table, user);
        }
        RunConfig::deserialize(table).map_err(|e| CliError::usage(format!("invalid config: {e}")))
    }
}

impl SynthSection {
    pub fn to_core(&self, seed: u64) -> Result<SynthConfig, CliError> {
        let k = &self.intrinsics;
        Ok(SynthConfig {
            room: self.room.into(),
            landmark_sites: self.landmark_sites,
            occluders: self.occluders,
            occluder_footprint: (self.occluder_footprint[0], self.occluder_footprint[1]),
            occluder_height: (self.occluder_height[0], self.occluder_height[1]),
            cameras: self.cameras,
            camera_height: (self.camera_height[0], self.camera_height[1]),
            camera_wall_clearance: self.camera_wall_clearance,
            min_visible_landmarks: self.min_visible_landmarks,
            intrinsics: Intrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)?,
            seed,
        })
    }
}

impl SelectSection {
    pub fn to_core(&self) -> SelectionParams {
        SelectionParams {
            count: self.count,
            initial_radius: self.initial_radius,
            min_track: self.min_track,
        }
    }
}

impl PartitionSection {
    pub fn criterion(&self) -> Result<Criterion, CliError> {
        self.criterion.parse().map_err(|e: sceneloc::Error| CliError::usage(e.to_string()))
    }
}

impl VisibilitySection {
    pub fn to_core(&self) -> VisibilityParams {
        VisibilityParams {
            tolerances: VisibilityTolerances {
                depth_abs: self.depth_abs,
                depth_rel: self.depth_rel,
                normal_deg: self.normal_deg,
            },
            max_surface_distance: self.max_surface_distance,
            decimation: self.decimation,
        }
    }
}

impl SimulateSection {
    pub fn to_core(&self, seed: u64) -> SimulationParams {
        SimulationParams {
            noise_sigma_px: self.noise_sigma_px,
            outlier_rate: self.outlier_rate,
            min_outlier_offset_px: self.min_outlier_offset_px,
            confidence: ConfidenceModel {
                inlier_scale: self.inlier_confidence_scale,
                inlier_floor: self.inlier_confidence_floor,
                outlier_low: self.outlier_confidence[0],
                outlier_high: self.outlier_confidence[1],
            },
            seed,
        }
    }
}

impl LocalizeSection {
    pub fn to_core(&self) -> Result<SolverConfig, CliError> {
        let refinement: Refinement = self
            .refinement
            .parse()
            .map_err(|e: sceneloc::Error| CliError::usage(e.to_string()))?;
        let sampling = match self.sampling.as_str() {
            "progressive" => SamplingStrategy::Progressive,
            "uniform" => SamplingStrategy::Uniform,
            other => return Err(CliError::usage(format!("unknown sampling strategy `{other}`"))),
        };
        Ok(SolverConfig {
            exponent: self.weight_exp,
            threshold_px: self.threshold_px,
            max_iterations: self.max_iterations,
            confidence: self.confidence,
            min_inliers: self.min_inliers,
            refinement,
            weighted_scoring: self.weighted_scoring,
            sampling,
        })
    }
}
