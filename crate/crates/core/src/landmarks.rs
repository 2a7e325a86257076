//! Greedy selection of salient, spatially well distributed landmarks from an
//! SfM point cloud, and the plain-text landmarks file.
//!
//! Selection order is meaningful: running the selection for `K' < K` with the
//! same parameters yields exactly the first `K'` landmarks of the larger run.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{SceneModel, TrackPoint};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    /// Position in selection order, `0..K`.
    pub id: u32,
    pub source_point_id: u64,
    pub xyz: Vector3<f64>,
    pub saliency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub count: usize,
    pub initial_radius: f64,
    pub min_track: usize,
}

impl SelectionParams {
    pub const DEFAULT_MIN_TRACK: usize = 10;

    pub fn new(count: usize, initial_radius: f64) -> Self {
        SelectionParams {
            count,
            initial_radius,
            min_track: Self::DEFAULT_MIN_TRACK,
        }
    }
}

/// Ordered landmarks; ids are contiguous and source points unique.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    landmarks: Vec<Landmark>,
    provenance: Option<SelectionParams>,
}

impl LandmarkSet {
    pub fn new(landmarks: Vec<Landmark>, provenance: Option<SelectionParams>) -> Result<Self> {
        let mut sources = std::collections::BTreeSet::new();
        for (i, lm) in landmarks.iter().enumerate() {
            if lm.id as usize != i {
                return Err(Error::InvalidInput(format!(
                    "landmark at position {i} has id {}; ids must be 0..K in order",
                    lm.id
                )));
            }
            if !sources.insert(lm.source_point_id) {
                return Err(Error::InvalidInput(format!(
                    "source point {} selected twice",
                    lm.source_point_id
                )));
            }
            if !(lm.saliency >= 0.0) {
                return Err(Error::InvalidInput(format!("landmark {i} has negative saliency")));
            }
        }
        Ok(LandmarkSet {
            landmarks,
            provenance,
        })
    }

    pub fn empty() -> Self {
        LandmarkSet {
            landmarks: Vec::new(),
            provenance: None,
        }
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn get(&self, id: u32) -> Option<&Landmark> {
        self.landmarks.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    /// Parameters of the selection run that produced this set, if known.
    pub fn provenance(&self) -> Option<&SelectionParams> {
        self.provenance.as_ref()
    }
}

/// Saliency of a track point: `n_views * (1 + spread)`, where `spread` is the
/// mean pairwise angle between the viewing rays of the observing cameras,
/// capped at π/2.
pub fn score_saliency(point: &TrackPoint, model: &SceneModel) -> f64 {
    let mut image_ids: Vec<u32> = point.observations.iter().map(|o| o.image_id).collect();
    image_ids.sort_unstable();
    image_ids.dedup();

    let rays: Vec<Vector3<f64>> = image_ids
        .iter()
        .filter_map(|id| model.image(*id))
        .map(|im| (point.xyz - im.pose.center()).normalize())
        .collect();

    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, a) in rays.iter().enumerate() {
        for b in &rays[i + 1..] {
            sum += a.cross(b).norm().atan2(a.dot(b));
            pairs += 1;
        }
    }
    let spread = if pairs == 0 { 0.0 } else { (sum / pairs as f64).min(FRAC_PI_2) };
    image_ids.len() as f64 * (1.0 + spread)
}

/// Greedy landmark selection; see [`select_landmarks_traced`].
pub fn select_landmarks(model: &SceneModel, params: &SelectionParams) -> Result<LandmarkSet> {
    select_landmarks_traced(model, params).map(|(set, _)| set)
}

/// Greedy landmark selection that also returns, per landmark, the separation
/// radius in force when it was accepted.
///
/// Candidates are points with at least `min_track` observations, visited in
/// descending saliency (ties by point id). A candidate is accepted if it lies
/// farther than the current radius from every accepted landmark; when no
/// candidate qualifies the radius is halved.
pub fn select_landmarks_traced(model: &SceneModel, params: &SelectionParams) -> Result<(LandmarkSet, Vec<f64>)> {
    if params.count == 0 {
        return Err(Error::InvalidInput("landmark count must be at least 1".into()));
    }
    if !(params.initial_radius > 0.0 && params.initial_radius.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "initial radius must be positive, got {}",
            params.initial_radius
        )));
    }

    let mut candidates: Vec<(f64, &TrackPoint)> = model
        .points()
        .values()
        .filter(|p| p.track_length() >= params.min_track)
        .map(|p| (score_saliency(p, model), p))
        .collect();
    if candidates.len() < params.count {
        return Err(Error::InsufficientCandidates {
            requested: params.count,
            achievable: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));

    // distance from each candidate to the nearest accepted landmark
    let mut nearest = vec![f64::INFINITY; candidates.len()];
    let mut taken = vec![false; candidates.len()];
    let mut landmarks = Vec::with_capacity(params.count);
    let mut radii = Vec::with_capacity(params.count);
    let mut radius = params.initial_radius;

    while landmarks.len() < params.count {
        let pick = (0..candidates.len()).find(|&i| !taken[i] && nearest[i] > radius);
        let Some(i) = pick else {
            let farthest = (0..candidates.len())
                .filter(|&i| !taken[i])
                .map(|i| nearest[i])
                .fold(0.0, f64::max);
            if farthest <= 0.0 {
                return Err(Error::InsufficientCandidates {
                    requested: params.count,
                    achievable: landmarks.len(),
                });
            }
            // equivalent to halving repeatedly until some candidate qualifies
            while radius >= farthest {
                radius /= 2.0;
            }
            continue;
        };

        let (saliency, point) = candidates[i];
        taken[i] = true;
        landmarks.push(Landmark {
            id: landmarks.len() as u32,
            source_point_id: point.id,
            xyz: point.xyz,
            saliency,
        });
        radii.push(radius);
        for (j, (_, other)) in candidates.iter().enumerate() {
            if !taken[j] {
                nearest[j] = nearest[j].min((other.xyz - point.xyz).norm());
            }
        }
    }

    Ok((LandmarkSet::new(landmarks, Some(*params))?, radii))
}

/// Writes one `id source_point_id x y z saliency` line per landmark.
pub fn write_landmarks(set: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for lm in set.landmarks() {
        writeln!(
            out,
            "{} {} {} {} {} {}",
            lm.id, lm.source_point_id, lm.xyz.x, lm.xyz.y, lm.xyz.z, lm.saliency
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut landmarks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 6 {
            return Err(Error::parse(path, i + 1, format!("expected 6 fields, found {}", tokens.len())));
        }
        let num = |k: usize| {
            tokens[k]
                .parse::<f64>()
                .map_err(|_| Error::parse(path, i + 1, format!("invalid number `{}`", tokens[k])))
        };
        let id = tokens[0]
            .parse::<u32>()
            .map_err(|_| Error::parse(path, i + 1, format!("invalid landmark id `{}`", tokens[0])))?;
        let source_point_id = tokens[1]
            .parse::<u64>()
            .map_err(|_| Error::parse(path, i + 1, format!("invalid point id `{}`", tokens[1])))?;
        landmarks.push(Landmark {
            id,
            source_point_id,
            xyz: Vector3::new(num(2)?, num(3)?, num(4)?),
            saliency: num(5)?,
        });
    }
    LandmarkSet::new(landmarks, None).map_err(|e| Error::parse(path, 0, e.to_string()))
}
