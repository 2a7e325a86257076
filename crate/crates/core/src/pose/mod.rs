//! Confidence-weighted camera pose estimation.
//!
//! Detection confidences `v` become weights `w = v^e`. The weights order
//! PROSAC's sampling over P3P hypotheses and weight the reprojection cost
//! of the final nonlinear refinement.

mod p3p;
mod prosac;
mod refine;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};

pub use p3p::{p3p_bearings, p3p_solve, reprojection_error, P3P_REPROJECTION_TOL};
pub use prosac::{adaptive_iterations, prosac_estimate, sampling_order};
pub use refine::{apply_increment, refine_weighted, reprojection_jacobian, weighted_cost, RefineReport};

use crate::detection::{DetectionSet, PRUNE_THRESHOLD};
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::scene::{Intrinsics, Pose};

/// A detection joined with its landmark position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub landmark_id: u32,
    pub uv: Vector2<f64>,
    pub xyz: Vector3<f64>,
    pub confidence: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Refinement {
    None,
    Unweighted,
    Weighted,
}

impl FromStr for Refinement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Refinement::None),
            "unweighted" => Ok(Refinement::Unweighted),
            "weighted" => Ok(Refinement::Weighted),
            _ => Err(Error::InvalidInput(format!("unknown refinement `{s}`"))),
        }
    }
}

/// How PROSAC draws minimal samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingStrategy {
    /// Weight-ordered progressive sampling.
    Progressive,
    /// Uniform sampling over all correspondences (plain RANSAC).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Weight exponent `e` in `w = v^e`.
    pub exponent: f64,
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub refinement: Refinement,
    /// Score hypotheses by inlier weight sum instead of inlier count.
    pub weighted_scoring: bool,
    pub sampling: SamplingStrategy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            exponent: 2.0,
            threshold_px: 4.0,
            max_iterations: 2000,
            confidence: 0.999,
            min_inliers: 12,
            refinement: Refinement::Weighted,
            weighted_scoring: false,
            sampling: SamplingStrategy::Progressive,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.exponent >= 0.0) || !self.exponent.is_finite() {
            return Err(Error::InvalidInput(format!("weight exponent {} must be ≥ 0", self.exponent)));
        }
        if !(self.threshold_px > 0.0) {
            return Err(Error::InvalidInput(format!("inlier threshold {} must be > 0", self.threshold_px)));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidInput(format!("confidence {} outside (0, 1)", self.confidence)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimateStatus {
    Ok,
    Degenerate,
    Insufficient,
    NoConsensus,
}

impl EstimateStatus {
    pub fn name(&self) -> &'static str {
        match self {
            EstimateStatus::Ok => "ok",
            EstimateStatus::Degenerate => "degenerate",
            EstimateStatus::Insufficient => "insufficient",
            EstimateStatus::NoConsensus => "no_consensus",
        }
    }
}

impl fmt::Display for EstimateStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimateStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            EstimateStatus::Ok,
            EstimateStatus::Degenerate,
            EstimateStatus::Insufficient,
            EstimateStatus::NoConsensus,
        ]
        .into_iter()
        .find(|st| st.name() == s)
        .ok_or_else(|| Error::InvalidInput(format!("unknown status `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// Present only when `status` is `Ok`.
    pub pose: Option<Pose>,
    pub inliers: BTreeSet<u32>,
    pub iterations: usize,
    /// Iteration that produced the returned hypothesis.
    pub best_found_at: usize,
    /// First iteration whose hypothesis reached `min_inliers`.
    pub first_consensus_at: Option<usize>,
    /// Mean reprojection error over the inliers, pixels.
    pub mean_reproj_px: f64,
    pub status: EstimateStatus,
    pub refinement: Option<RefineReport>,
}

impl PoseEstimate {
    pub fn failed(status: EstimateStatus, iterations: usize) -> Self {
        PoseEstimate {
            pose: None,
            inliers: BTreeSet::new(),
            iterations,
            best_found_at: 0,
            first_consensus_at: None,
            mean_reproj_px: f64::NAN,
            status,
            refinement: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == EstimateStatus::Ok
    }
}

/// Joins detections with landmark positions and computes `w = v^e`.
///
/// Detections with `v ≤ 0.3` are dropped.
pub fn compute_weights(dets: &DetectionSet, ls: &LandmarkSet, exponent: f64) -> Result<Vec<Correspondence>> {
    if !(exponent >= 0.0) || !exponent.is_finite() {
        return Err(Error::InvalidInput(format!("weight exponent {exponent} must be ≥ 0")));
    }
    let mut out = Vec::with_capacity(dets.len());
    for d in dets.detections() {
        if d.confidence <= PRUNE_THRESHOLD {
            continue;
        }
        let lm = ls.get(d.landmark_id).ok_or(Error::UnknownLandmark(d.landmark_id))?;
        out.push(Correspondence {
            landmark_id: d.landmark_id,
            uv: d.uv,
            xyz: lm.xyz,
            confidence: d.confidence,
            weight: d.confidence.powf(exponent),
        });
    }
    Ok(out)
}

/// Weights, robust estimation, then refinement on the inliers.
pub fn localize(
    dets: &DetectionSet,
    ls: &LandmarkSet,
    k: &Intrinsics,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<PoseEstimate> {
    cfg.validate()?;
    let corrs = compute_weights(dets, ls, cfg.exponent)?;
    let mut estimate = prosac_estimate(&corrs, k, cfg, seed);
    if cfg.refinement == Refinement::None || !estimate.is_ok() {
        return Ok(estimate);
    }
    let inliers: Vec<Correspondence> = corrs
        .iter()
        .filter(|c| estimate.inliers.contains(&c.landmark_id))
        .copied()
        .collect();
    let initial = estimate.pose.expect("ok estimates carry a pose");
    let (pose, report) = refine_weighted(&initial, &inliers, k, cfg)?;
    let all: Vec<usize> = (0..inliers.len()).collect();
    estimate.mean_reproj_px = prosac::mean_error(&pose, &inliers, &all, k);
    estimate.pose = Some(pose);
    estimate.refinement = Some(report);
    Ok(estimate)
}

/// One row of a pose file.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub image_id: u32,
    pub pose: Option<Pose>,
    pub status: EstimateStatus,
    pub num_inliers: usize,
    pub mean_reproj_px: f64,
}

impl PoseRecord {
    pub fn from_estimate(image_id: u32, e: &PoseEstimate) -> Self {
        PoseRecord {
            image_id,
            pose: e.pose,
            status: e.status,
            num_inliers: e.inliers.len(),
            mean_reproj_px: e.mean_reproj_px,
        }
    }
}

const POSE_HEADER: &str = "# image_id qw qx qy qz tx ty tz status num_inliers mean_reproj_px";

/// Writes one line per record, ordered by image id. Failed images carry
/// the identity pose and `nan` error.
pub fn write_poses(records: &[PoseRecord], path: impl AsRef<Path>) -> Result<()> {
    write_poses_annotated(records, &[], path)
}

/// [`write_poses`] with extra `# `-prefixed lines ahead of the column header.
pub fn write_poses_annotated(records: &[PoseRecord], comments: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut sorted: Vec<&PoseRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.image_id);
    let mut out = String::new();
    for c in comments {
        if c.contains('\n') {
            return Err(Error::InvalidInput("pose file comments must be single lines".into()));
        }
        writeln!(out, "# {c}").unwrap();
    }
    writeln!(out, "{POSE_HEADER}").unwrap();
    for r in sorted {
        let identity = Pose::identity();
        let pose = r.pose.as_ref().unwrap_or(&identity);
        let q = pose.quaternion();
        let t = pose.translation();
        let err = if r.pose.is_some() { r.mean_reproj_px } else { f64::NAN };
        writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {}",
            r.image_id, q[0], q[1], q[2], q[3], t.x, t.y, t.z, r.status, r.num_inliers, err
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<BTreeMap<u32, PoseRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 11 {
            return Err(Error::parse(path, i + 1, format!("expected 11 fields, found {}", toks.len())));
        }
        let num = |k: usize| -> Result<f64> {
            toks[k]
                .parse::<f64>()
                .map_err(|_| Error::parse(path, i + 1, format!("invalid number `{}`", toks[k])))
        };
        let image_id: u32 = toks[0]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("invalid image id `{}`", toks[0])))?;
        let status: EstimateStatus = toks[8].parse().map_err(|e: Error| Error::parse(path, i + 1, e.to_string()))?;
        let num_inliers: usize = toks[9]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("invalid inlier count `{}`", toks[9])))?;
        let pose = if status == EstimateStatus::Ok {
            let q = [num(1)?, num(2)?, num(3)?, num(4)?];
            let t = Vector3::new(num(5)?, num(6)?, num(7)?);
            Some(Pose::from_quaternion(q, t).map_err(|e| Error::parse(path, i + 1, e.to_string()))?)
        } else {
            None
        };
        let record = PoseRecord {
            image_id,
            pose,
            status,
            num_inliers,
            mean_reproj_px: num(10)?,
        };
        if out.insert(image_id, record).is_some() {
            return Err(Error::parse(path, i + 1, format!("image {image_id} listed twice")));
        }
    }
    Ok(out)
}
