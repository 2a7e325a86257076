//! Landmark heatmaps and 2D detections.
//!
//! Heatmaps live on a grid downsampled 8× from the image; grid node `g`
//! corresponds to image pixel `8 g`. A detection is extracted from the
//! heatmap peak, pruned when its value is at most 0.3, and refined to
//! subpixel accuracy by a weighted mean over the 17×17 patch around it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::scene::{project, SceneModel};
use crate::visibility::VisibilityTable;

pub const DOWNSAMPLE: u32 = 8;
/// Peaks at or below this value are discarded.
pub const PRUNE_THRESHOLD: f64 = 0.3;
/// Half-width of the refinement patch (17×17).
pub const PATCH_RADIUS: usize = 8;
pub const DEFAULT_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub landmark_id: u32,
    width: usize,
    height: usize,
    values: Vec<f64>,
}

/// Heatmap grid dimensions for an image.
pub fn grid_dims(image_width: u32, image_height: u32) -> (usize, usize) {
    (
        image_width.div_ceil(DOWNSAMPLE) as usize,
        image_height.div_ceil(DOWNSAMPLE) as usize,
    )
}

impl Heatmap {
    /// Row-major values in `[0, 1]`.
    pub fn from_values(landmark_id: u32, width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "heatmap has {} values for a {width}x{height} grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Heatmap {
            landmark_id,
            width,
            height,
            values,
        })
    }

    pub fn zeros(landmark_id: u32, width: usize, height: usize) -> Self {
        Heatmap {
            landmark_id,
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Peak-normalized Gaussian label. `uv` is in full-resolution pixels and
/// `sigma` in grid cells; `None` gives an all-zero map.
pub fn render_gt_heatmap(
    landmark_id: u32,
    uv: Option<&Vector2<f64>>,
    image_width: u32,
    image_height: u32,
    sigma: f64,
) -> Heatmap {
    let (w, h) = grid_dims(image_width, image_height);
    let mut hm = Heatmap::zeros(landmark_id, w, h);
    let Some(uv) = uv else { return hm };
    let c = uv / DOWNSAMPLE as f64;
    let s2 = 2.0 * sigma * sigma;
    for y in 0..h {
        for x in 0..w {
            let d2 = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
            hm.values[y * w + x] = (-d2 / s2).exp();
        }
    }
    hm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub landmark_id: u32,
    /// Full-resolution pixel coordinates.
    pub uv: Vector2<f64>,
    pub confidence: f64,
}

/// Peak detection with subpixel refinement, or `None` if pruned.
pub fn extract_detection(hm: &Heatmap) -> Option<Detection> {
    let mut peak = (0, 0);
    let mut best = f64::NEG_INFINITY;
    for y in 0..hm.height {
        for x in 0..hm.width {
            let v = hm.get(x, y);
            if v > best {
                best = v;
                peak = (x, y);
            }
        }
    }
    if best <= PRUNE_THRESHOLD {
        return None;
    }
    let (px, py) = peak;
    let x0 = px.saturating_sub(PATCH_RADIUS);
    let x1 = (px + PATCH_RADIUS).min(hm.width - 1);
    let y0 = py.saturating_sub(PATCH_RADIUS);
    let y1 = (py + PATCH_RADIUS).min(hm.height - 1);
    let mut sum = 0.0;
    let mut acc = Vector2::zeros();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let w = hm.get(x, y);
            sum += w;
            acc += Vector2::new(x as f64, y as f64) * w;
        }
    }
    Some(Detection {
        landmark_id: hm.landmark_id,
        uv: acc / sum * DOWNSAMPLE as f64,
        confidence: best,
    })
}

/// Detections for one image, sorted by landmark id, at most one per landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub image_id: u32,
    detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(image_id: u32, mut detections: Vec<Detection>) -> Result<Self> {
        detections.sort_by_key(|d| d.landmark_id);
        if let Some(w) = detections.windows(2).find(|w| w[0].landmark_id == w[1].landmark_id) {
            return Err(Error::DuplicateLandmark(w[0].landmark_id));
        }
        if let Some(d) = detections
            .iter()
            .find(|d| !(d.confidence > 0.0 && d.confidence <= 1.0) || !d.uv.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidInput(format!(
                "detection of landmark {} has confidence {} at {:?}",
                d.landmark_id, d.confidence, d.uv
            )));
        }
        Ok(DetectionSet { image_id, detections })
    }

    pub fn empty(image_id: u32) -> Self {
        DetectionSet {
            image_id,
            detections: Vec::new(),
        }
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn get(&self, landmark_id: u32) -> Option<&Detection> {
        self.detections
            .binary_search_by_key(&landmark_id, |d| d.landmark_id)
            .ok()
            .map(|i| &self.detections[i])
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Keeps the detections whose landmark satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(u32) -> bool) -> DetectionSet {
        DetectionSet {
            image_id: self.image_id,
            detections: self.detections.iter().filter(|d| keep(d.landmark_id)).copied().collect(),
        }
    }
}

/// Union of per-partition detections for one image.
pub fn merge_ensemble(sets: &[DetectionSet], image_id: u32) -> Result<DetectionSet> {
    if let Some(s) = sets.iter().find(|s| s.image_id != image_id) {
        return Err(Error::InvalidInput(format!(
            "detection set for image {} merged into image {image_id}",
            s.image_id
        )));
    }
    DetectionSet::new(image_id, sets.iter().flat_map(|s| s.detections.iter().copied()).collect())
}

/// Per-image union over several detection maps (e.g. one file per partition).
pub fn merge_detection_maps(maps: &[BTreeMap<u32, DetectionSet>]) -> Result<BTreeMap<u32, DetectionSet>> {
    let images: BTreeSet<u32> = maps.iter().flat_map(|m| m.keys().copied()).collect();
    images
        .into_iter()
        .map(|id| {
            let sets: Vec<DetectionSet> = maps.iter().filter_map(|m| m.get(&id).cloned()).collect();
            merge_ensemble(&sets, id).map(|s| (id, s))
        })
        .collect()
}

/// How simulated confidences relate to noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceModel {
    /// Inlier confidence is `1 − ‖noise‖ / (inlier_scale · σ)` before clamping.
    pub inlier_scale: f64,
    /// Lower clamp for inlier confidence.
    pub inlier_floor: f64,
    pub outlier_low: f64,
    pub outlier_high: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            inlier_scale: 4.0,
            inlier_floor: 0.31,
            outlier_low: 0.31,
            outlier_high: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationParams {
    pub noise_sigma_px: f64,
    pub outlier_rate: f64,
    /// Outliers are drawn at least this far from the true projection.
    pub min_outlier_offset_px: f64,
    pub confidence: ConfidenceModel,
    pub seed: u64,
}

impl SimulationParams {
    pub fn new(noise_sigma_px: f64, outlier_rate: f64, seed: u64) -> Self {
        SimulationParams {
            noise_sigma_px,
            outlier_rate,
            min_outlier_offset_px: 8.0,
            confidence: ConfidenceModel::default(),
            seed,
        }
    }
}

/// Simulated detections plus the landmark ids that were emitted as outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedImage {
    pub detections: DetectionSet,
    pub outliers: BTreeSet<u32>,
}

/// Per-image generator: stream `image_id` of the seeded ChaCha8 generator,
/// so results do not depend on scheduling or on which images are simulated.
fn image_rng(seed: u64, image_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id as u64);
    rng
}

/// Smallest image diagonal in the model.
fn max_offset_bound(model: &SceneModel) -> f64 {
    model
        .cameras()
        .values()
        .map(|k| (k.width as f64).hypot(k.height as f64))
        .fold(f64::INFINITY, f64::min)
}

/// Stand-in detector: emits a noisy projection or a random outlier for every
/// visible landmark of every image.
pub fn simulate_detections_labeled(
    model: &SceneModel,
    ls: &LandmarkSet,
    vt: &VisibilityTable,
    params: &SimulationParams,
) -> Result<BTreeMap<u32, SimulatedImage>> {
    if !(0.0..=1.0).contains(&params.outlier_rate) {
        return Err(Error::InvalidInput(format!("outlier rate {} outside [0, 1]", params.outlier_rate)));
    }
    if !(params.noise_sigma_px >= 0.0) || !params.noise_sigma_px.is_finite() {
        return Err(Error::InvalidInput(format!("noise sigma {} must be ≥ 0", params.noise_sigma_px)));
    }
    if !(params.min_outlier_offset_px >= 0.0) || params.min_outlier_offset_px > 0.25 * max_offset_bound(model) {
        return Err(Error::InvalidInput(format!(
            "minimum outlier offset {} px is negative or too large for the images",
            params.min_outlier_offset_px
        )));
    }
    let cm = &params.confidence;
    if !(0.0 < cm.outlier_low && cm.outlier_low <= cm.outlier_high && cm.outlier_high <= 1.0)
        || !(0.0 < cm.inlier_floor && cm.inlier_floor <= 1.0)
        || !(cm.inlier_scale > 0.0)
    {
        return Err(Error::InvalidInput(format!("invalid confidence model {cm:?}")));
    }
    let noise = Normal::new(0.0, params.noise_sigma_px).expect("sigma validated");

    let images: Vec<_> = model.images().values().collect();
    images
        .par_iter()
        .map(|image| {
            let k = model.intrinsics_of(image.id).expect("model is cross-referenced");
            let mut rng = image_rng(params.seed, image.id);
            let mut detections = Vec::new();
            let mut outliers = BTreeSet::new();
            for lm in ls.landmarks() {
                if !vt.is_visible(lm.id, image.id) {
                    continue;
                }
                let Some(truth) = project(k, &image.pose, &lm.xyz) else {
                    continue;
                };
                if rng.random::<f64>() < params.outlier_rate {
                    let uv = loop {
                        let uv = Vector2::new(
                            rng.random_range(0.0..k.width as f64),
                            rng.random_range(0.0..k.height as f64),
                        );
                        if (uv - truth).norm() >= params.min_outlier_offset_px {
                            break uv;
                        }
                    };
                    let confidence = if cm.outlier_low < cm.outlier_high {
                        rng.random_range(cm.outlier_low..cm.outlier_high)
                    } else {
                        cm.outlier_low
                    };
                    detections.push(Detection {
                        landmark_id: lm.id,
                        uv,
                        confidence,
                    });
                    outliers.insert(lm.id);
                } else {
                    let n = Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                    let uv = truth + n;
                    if !k.contains(&uv) {
                        continue;
                    }
                    let confidence = if params.noise_sigma_px > 0.0 {
                        (1.0 - n.norm() / (cm.inlier_scale * params.noise_sigma_px)).clamp(cm.inlier_floor, 1.0)
                    } else {
                        1.0
                    };
                    detections.push(Detection {
                        landmark_id: lm.id,
                        uv,
                        confidence,
                    });
                }
            }
            let detections = DetectionSet::new(image.id, detections)?;
            Ok((image.id, SimulatedImage { detections, outliers }))
        })
        .collect()
}

/// [`simulate_detections_labeled`] without the outlier labels.
pub fn simulate_detections(
    model: &SceneModel,
    ls: &LandmarkSet,
    vt: &VisibilityTable,
    params: &SimulationParams,
) -> Result<BTreeMap<u32, DetectionSet>> {
    Ok(simulate_detections_labeled(model, ls, vt, params)?
        .into_iter()
        .map(|(id, s)| (id, s.detections))
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    image_id: u32,
    landmark_id: u32,
    u: f64,
    v_coord: f64,
    confidence: f64,
}

const HEADER: [&str; 5] = ["image_id", "landmark_id", "u", "v_coord", "confidence"];

/// CSV rows ordered by image id, then landmark id.
pub fn write_detections(sets: &BTreeMap<u32, DetectionSet>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(HEADER).map_err(csv_err)?;
    for set in sets.values() {
        for d in &set.detections {
            w.serialize(Row {
                image_id: set.image_id,
                landmark_id: d.landmark_id,
                u: d.uv.x,
                v_coord: d.uv.y,
                confidence: d.confidence,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<BTreeMap<u32, DetectionSet>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = r
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::parse(path, 1, format!("expected header `{}`", HEADER.join(","))));
    }
    let mut per_image: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    let mut seen: BTreeSet<(u32, u32)> = BTreeSet::new();
    for rec in r.deserialize::<Row>() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = seen.len() + 2;
        if !(rec.confidence > 0.0 && rec.confidence <= 1.0) {
            return Err(Error::parse(path, line, format!("confidence {} outside (0, 1]", rec.confidence)));
        }
        if !rec.u.is_finite() || !rec.v_coord.is_finite() {
            return Err(Error::parse(path, line, "non-finite coordinate"));
        }
        if !seen.insert((rec.image_id, rec.landmark_id)) {
            return Err(Error::parse(
                path,
                line,
                format!("landmark {} detected twice in image {}", rec.landmark_id, rec.image_id),
            ));
        }
        per_image.entry(rec.image_id).or_default().push(Detection {
            landmark_id: rec.landmark_id,
            uv: Vector2::new(rec.u, rec.v_coord),
            confidence: rec.confidence,
        });
    }
    per_image
        .into_iter()
        .map(|(id, d)| DetectionSet::new(id, d).map(|s| (id, s)))
        .collect()
}
