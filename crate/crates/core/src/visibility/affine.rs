//! Robust affine registration of dense geometry to the SfM frame, and
//! pruning of poorly registered points and images.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, Matrix3, Matrix4, Matrix4x3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::raster::DepthMap;
use crate::error::{Error, Result};
use crate::scene::{project, SceneModel};

const CONFIDENCE: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    a: Matrix3<f64>,
    b: Vector3<f64>,
}

impl AffineTransform {
    pub fn new(a: Matrix3<f64>, b: Vector3<f64>) -> Result<Self> {
        let det = a.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Degenerate(format!("affine matrix is singular (det {det:e})")));
        }
        Ok(AffineTransform { a, b })
    }

    pub fn identity() -> Self {
        AffineTransform {
            a: Matrix3::identity(),
            b: Vector3::zeros(),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.a
    }

    pub fn offset(&self) -> &Vector3<f64> {
        &self.b
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.a * p + self.b
    }
}

/// Solves `[s 1] X = t` for four matches; `None` if the sources are coplanar.
fn minimal_fit(matches: &[(Vector3<f64>, Vector3<f64>)], idx: &[usize]) -> Option<AffineTransform> {
    let mut m = Matrix4::zeros();
    let mut rhs = Matrix4x3::zeros();
    for (row, &i) in idx.iter().enumerate() {
        let (s, t) = &matches[i];
        m.set_row(row, &nalgebra::RowVector4::new(s.x, s.y, s.z, 1.0));
        rhs.set_row(row, &t.transpose());
    }
    let x = m.lu().solve(&rhs)?;
    let a = x.fixed_view::<3, 3>(0, 0).transpose();
    let b = x.row(3).transpose();
    AffineTransform::new(a, b).ok()
}

fn least_squares(matches: &[(Vector3<f64>, Vector3<f64>)], mask: &[bool]) -> Result<AffineTransform> {
    let rows: Vec<usize> = (0..matches.len()).filter(|i| mask[*i]).collect();
    let mut m = DMatrix::zeros(rows.len(), 4);
    let mut rhs = DMatrix::zeros(rows.len(), 3);
    for (r, &i) in rows.iter().enumerate() {
        let (s, t) = &matches[i];
        m[(r, 0)] = s.x;
        m[(r, 1)] = s.y;
        m[(r, 2)] = s.z;
        m[(r, 3)] = 1.0;
        for c in 0..3 {
            rhs[(r, c)] = t[c];
        }
    }
    let x = m
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Degenerate(format!("least-squares affine fit failed: {e}")))?;
    let a = Matrix3::from_fn(|r, c| x[(c, r)]);
    let b = Vector3::new(x[(3, 0)], x[(3, 1)], x[(3, 2)]);
    AffineTransform::new(a, b)
}

fn inliers(t: &AffineTransform, matches: &[(Vector3<f64>, Vector3<f64>)], threshold: f64) -> Vec<bool> {
    matches.iter().map(|(s, d)| (t.apply(s) - d).norm() <= threshold).collect()
}

/// True when the source points span less than a thin slab.
fn sources_are_coplanar(matches: &[(Vector3<f64>, Vector3<f64>)]) -> bool {
    let n = matches.len() as f64;
    let mean = matches.iter().map(|(s, _)| s).sum::<Vector3<f64>>() / n;
    let cov = matches
        .iter()
        .map(|(s, _)| (s - mean) * (s - mean).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let eig = cov.symmetric_eigenvalues();
    let max = eig.max();
    max <= 0.0 || eig.min() <= 1e-12 * max
}

/// RANSAC estimate of `t ≈ A s + b` from `(source, target)` matches.
///
/// Four-point samples are solved exactly; the iteration count adapts to
/// the best inlier ratio at 99.9% confidence and is capped at `max_iter`.
/// The returned transform is the least-squares fit on the best consensus
/// set, and the mask marks residuals within `threshold` under it.
pub fn estimate_affine_alignment(
    matches: &[(Vector3<f64>, Vector3<f64>)],
    threshold: f64,
    max_iter: usize,
    seed: u64,
) -> Result<(AffineTransform, Vec<bool>)> {
    if matches.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "affine alignment needs at least 4 matches, got {}",
            matches.len()
        )));
    }
    if sources_are_coplanar(matches) {
        return Err(Error::Degenerate("source points are coplanar".into()));
    }
    let n = matches.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut needed = max_iter;
    let mut it = 0;
    while it < needed.min(max_iter) {
        it += 1;
        let idx = rand::seq::index::sample(&mut rng, n, 4).into_vec();
        let Some(model) = minimal_fit(matches, &idx) else { continue };
        let mask = inliers(&model, matches, threshold);
        let count = mask.iter().filter(|m| **m).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            let ratio = count as f64 / n as f64;
            needed = if ratio >= 1.0 {
                0
            } else {
                ((1.0 - CONFIDENCE).ln() / (1.0 - ratio.powi(4)).ln()).ceil() as usize
            };
            best = Some((count, mask));
        }
    }
    let Some((count, mask)) = best.filter(|(c, _)| *c >= 4) else {
        return Err(Error::NoConsensus("no affine model reached 4 inliers".into()));
    };
    let refit = least_squares(matches, &mask)?;
    let refit_mask = inliers(&refit, matches, threshold);
    if refit_mask.iter().filter(|m| **m).count() >= count {
        Ok((refit, refit_mask))
    } else {
        Ok((refit, mask))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationParams {
    /// Points seen in fewer images are dropped.
    pub min_obs: usize,
    /// Images whose mean depth residual exceeds this (meters) are dropped.
    pub max_residual: f64,
    /// Optionally drop images left with fewer surviving observations.
    pub min_points_per_image: Option<usize>,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        RegistrationParams {
            min_obs: 50,
            max_residual: 0.05,
            min_points_per_image: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegistrationFilter {
    pub images: BTreeSet<u32>,
    pub points: BTreeSet<u64>,
}

/// Keeps points with track length ≥ `min_obs` and images whose mean depth
/// residual is ≤ `max_residual`. Images missing from `residuals` are dropped.
pub fn filter_registration(
    model: &SceneModel,
    residuals: &BTreeMap<u32, f64>,
    params: &RegistrationParams,
) -> Result<RegistrationFilter> {
    let points: BTreeSet<u64> = model
        .points()
        .values()
        .filter(|p| p.track_length() >= params.min_obs)
        .map(|p| p.id)
        .collect();
    let mut per_image: BTreeMap<u32, usize> = BTreeMap::new();
    for id in &points {
        for obs in &model.points()[id].observations {
            *per_image.entry(obs.image_id).or_default() += 1;
        }
    }
    let images: BTreeSet<u32> = model
        .images()
        .keys()
        .copied()
        .filter(|id| residuals.get(id).is_some_and(|r| *r <= params.max_residual))
        .filter(|id| {
            params
                .min_points_per_image
                .is_none_or(|m| per_image.get(id).copied().unwrap_or(0) >= m)
        })
        .collect();
    if images.is_empty() {
        return Err(Error::EmptyResult("every image failed registration filtering".into()));
    }
    Ok(RegistrationFilter { images, points })
}

/// Mean `|depth − z|` over the observations of points with track length
/// ≥ `min_obs`, per image, using the aligned depth maps. Samples with no
/// depth are skipped; images without samples are absent from the result.
pub fn mean_depth_residuals(
    model: &SceneModel,
    depth: &BTreeMap<u32, DepthMap>,
    min_obs: usize,
) -> BTreeMap<u32, f64> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for p in model.points().values().filter(|p| p.track_length() >= min_obs) {
        for obs in &p.observations {
            let (Some(dm), Some(img)) = (depth.get(&obs.image_id), model.image(obs.image_id)) else {
                continue;
            };
            let z = img.pose.transform(&p.xyz).z;
            if z <= 0.0 {
                continue;
            }
            let Some(uv) = project(dm.intrinsics(), &img.pose, &p.xyz) else {
                continue;
            };
            let (d, _) = dm.sample(&uv);
            if d.is_finite() {
                let e = acc.entry(obs.image_id).or_default();
                e.0 += (d - z).abs();
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect()
}
