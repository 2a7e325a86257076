//! Localization metrics and report tables.
//!
//! Rotation error is the geodesic angle of `R R̂ᵀ`, position error the
//! distance between camera centers. Recall counts images within both
//! thresholds; failed localizations are misses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::detection::DetectionSet;
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::pose::EstimateStatus;
use crate::scene::{bearing, Intrinsics, Pose, SceneModel};

const ORTHOGONALITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseErrors {
    /// Degrees, in [0, 180].
    pub rotation_deg: f64,
    /// Meters.
    pub position_m: f64,
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(dev <= ORTHOGONALITY_TOL) || !(r.determinant() > 0.0) {
        return Err(Error::InvalidInput(format!("not a rotation (orthogonality error {dev:e})")));
    }
    Ok(())
}

/// Geodesic angle between two rotations, in degrees.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `cos θ = (tr(R R̂ᵀ) − 1)/2` and
/// `sin θ` from the skew part, so small angles keep full precision.
pub fn rotation_error(r: &Matrix3<f64>, r_hat: &Matrix3<f64>) -> Result<f64> {
    check_rotation(r)?;
    check_rotation(r_hat)?;
    let m = r * r_hat.transpose();
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() / 2.0;
    Ok(sin.min(1.0).atan2(cos).to_degrees())
}

/// Distance between the camera centers `−Rᵀt`.
pub fn position_error(pose: &Pose, pose_hat: &Pose) -> f64 {
    (pose.center() - pose_hat.center()).norm()
}

pub fn pose_errors(gt: &Pose, est: &Pose) -> Result<PoseErrors> {
    Ok(PoseErrors {
        rotation_deg: rotation_error(gt.rotation(), est.rotation())?,
        position_m: position_error(gt, est),
    })
}

/// Fraction of entries within both thresholds; `None` entries are misses.
pub fn recall_at(errors: &[Option<PoseErrors>], r_thresh_deg: f64, t_thresh_m: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("recall over an empty set".into()));
    }
    let hits = errors
        .iter()
        .flatten()
        .filter(|e| e.rotation_deg <= r_thresh_deg && e.position_m <= t_thresh_m)
        .count();
    Ok(hits as f64 / errors.len() as f64)
}

/// Angle between the detection's bearing and the true landmark direction.
pub fn detection_angular_error(uv: &Vector2<f64>, gt: &Pose, k: &Intrinsics, xyz: &Vector3<f64>) -> Result<f64> {
    let pc = gt.transform(xyz);
    if !(pc.z > 0.0) {
        return Err(Error::InvalidInput("landmark is behind the camera".into()));
    }
    let b = bearing(k, uv);
    let d = pc.normalize();
    Ok(b.cross(&d).norm().atan2(b.dot(&d)).to_degrees())
}

/// Angular errors of every detection against the ground-truth model.
/// Images absent from the model are an error.
pub fn detection_errors(
    detections: &BTreeMap<u32, DetectionSet>,
    gt: &SceneModel,
    ls: &LandmarkSet,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (image_id, set) in detections {
        let image = gt
            .image(*image_id)
            .ok_or_else(|| Error::InvalidInput(format!("detections for unknown image {image_id}")))?;
        let k = gt.intrinsics_of(*image_id).expect("validated model");
        for d in set.detections() {
            let lm = ls.get(d.landmark_id).ok_or(Error::UnknownLandmark(d.landmark_id))?;
            out.push(detection_angular_error(&d.uv, &image.pose, k, &lm.xyz)?);
        }
    }
    Ok(out)
}

/// Median of the finite values, NaN if there are none.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linearly interpolated quantile of the finite values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Labels one evaluated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Single token, no whitespace.
    pub name: String,
    pub landmarks_per_partition: usize,
    pub partitions: usize,
    pub weight_exponent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEstimate {
    pub status: EstimateStatus,
    pub pose: Option<Pose>,
}

#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub estimates: BTreeMap<u32, ImageEstimate>,
    pub detection_errors_deg: Vec<f64>,
    pub seconds_per_image: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub config: RunConfig,
    pub images: usize,
    pub recall: f64,
    pub median_rotation_deg: f64,
    pub median_position_m: f64,
    pub median_detection_deg: f64,
    pub seconds_per_image: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rotation_threshold_deg: f64,
    pub position_threshold_m: f64,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub config: String,
    pub image_id: u32,
    pub status: EstimateStatus,
    pub errors: Option<PoseErrors>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub images: Vec<ImageResult>,
}

/// Scores every run against `gt`. Each run must cover exactly the
/// ground-truth image set.
pub fn build_report(runs: &[Run], gt: &BTreeMap<u32, Pose>, r_thresh_deg: f64, t_thresh_m: f64) -> Result<Evaluation> {
    let gt_ids: BTreeSet<u32> = gt.keys().copied().collect();
    let mut rows = Vec::with_capacity(runs.len());
    let mut images = Vec::new();
    for run in runs {
        let name = &run.config.name;
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidInput(format!("config name `{name}` must be a single token")));
        }
        let ids: BTreeSet<u32> = run.estimates.keys().copied().collect();
        if ids != gt_ids {
            return Err(Error::InvalidInput(format!(
                "run `{name}` covers {} images, ground truth has {} (mismatched image sets)",
                ids.len(),
                gt_ids.len()
            )));
        }
        let mut errs = Vec::with_capacity(gt.len());
        for (id, est) in &run.estimates {
            let e = match (&est.pose, est.status) {
                (Some(p), EstimateStatus::Ok) => Some(pose_errors(&gt[id], p)?),
                _ => None,
            };
            errs.push(e);
            images.push(ImageResult {
                config: name.clone(),
                image_id: *id,
                status: est.status,
                errors: e,
            });
        }
        let located: Vec<PoseErrors> = errs.iter().flatten().copied().collect();
        rows.push(ReportRow {
            config: run.config.clone(),
            images: errs.len(),
            recall: recall_at(&errs, r_thresh_deg, t_thresh_m)?,
            median_rotation_deg: median(&located.iter().map(|e| e.rotation_deg).collect::<Vec<_>>()),
            median_position_m: median(&located.iter().map(|e| e.position_m).collect::<Vec<_>>()),
            median_detection_deg: median(&run.detection_errors_deg),
            seconds_per_image: run.seconds_per_image.unwrap_or(f64::NAN),
        });
    }
    Ok(Evaluation {
        report: EvalReport {
            rotation_threshold_deg: r_thresh_deg,
            position_threshold_m: t_thresh_m,
            rows,
        },
        images,
    })
}

const COLUMNS: [&str; 10] = [
    "config",
    "landmarks_per_partition",
    "partitions",
    "weight_exp",
    "images",
    "recall",
    "median_dR_deg",
    "median_dt_m",
    "median_det_deg",
    "sec_per_image",
];

impl EvalReport {
    /// Tab-separated machine table, a `---` separator, then an aligned
    /// table for reading.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# recall thresholds: {} deg, {} m",
            self.rotation_threshold_deg, self.position_threshold_m
        )
        .unwrap();
        writeln!(out, "{}", COLUMNS.join("\t")).unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.config.name,
                r.config.landmarks_per_partition,
                r.config.partitions,
                r.config.weight_exponent,
                r.images,
                r.recall,
                r.median_rotation_deg,
                r.median_position_m,
                r.median_detection_deg,
                r.seconds_per_image
            )
            .unwrap();
        }
        out.push_str("---\n");
        let header = [
            "config", "ensemble", "e", "images", "recall", "med dR (deg)", "med dt (cm)", "med det (deg)", "ms/image",
        ];
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.config.name.clone(),
                    format!("{}x{}", r.config.landmarks_per_partition, r.config.partitions),
                    format!("{}", r.config.weight_exponent),
                    r.images.to_string(),
                    format!("{:.1}%", 100.0 * r.recall),
                    format!("{:.3}", r.median_rotation_deg),
                    format!("{:.2}", 100.0 * r.median_position_m),
                    format!("{:.3}", r.median_detection_deg),
                    format!("{:.2}", 1000.0 * r.seconds_per_image),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].len()).chain([header[c].len()]).max().unwrap())
            .collect();
        let line = |row: &[String]| {
            let padded: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
            padded.join("  ").trim_end().to_string()
        };
        writeln!(out, "{}", line(&header.map(String::from))).unwrap();
        for row in &cells {
            writeln!(out, "{}", line(row)).unwrap();
        }
        out
    }

    /// Parses the machine table of [`EvalReport::to_text`].
    pub fn from_text(text: &str, source: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::parse(source, 1, "empty report"))?;
        let thresholds: Vec<f64> = first
            .strip_prefix("# recall thresholds: ")
            .map(|rest| {
                rest.split(',')
                    .filter_map(|part| part.split_whitespace().next()?.parse().ok())
                    .collect()
            })
            .unwrap_or_default();
        if thresholds.len() != 2 {
            return Err(Error::parse(source, 1, "missing recall thresholds line"));
        }
        match lines.next() {
            Some((_, h)) if h == COLUMNS.join("\t") => {}
            _ => return Err(Error::parse(source, 2, "missing column header")),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line == "---" {
                break;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != COLUMNS.len() {
                return Err(Error::parse(source, i + 1, format!("expected {} columns", COLUMNS.len())));
            }
            let float = |k: usize| -> Result<f64> {
                f[k].parse()
                    .map_err(|_| Error::parse(source, i + 1, format!("invalid {} `{}`", COLUMNS[k], f[k])))
            };
            let int = |k: usize| -> Result<usize> {
                f[k].parse()
                    .map_err(|_| Error::parse(source, i + 1, format!("invalid {} `{}`", COLUMNS[k], f[k])))
            };
            rows.push(ReportRow {
                config: RunConfig {
                    name: f[0].to_string(),
                    landmarks_per_partition: int(1)?,
                    partitions: int(2)?,
                    weight_exponent: float(3)?,
                },
                images: int(4)?,
                recall: float(5)?,
                median_rotation_deg: float(6)?,
                median_position_m: float(7)?,
                median_detection_deg: float(8)?,
                seconds_per_image: float(9)?,
            });
        }
        Ok(EvalReport {
            rotation_threshold_deg: thresholds[0],
            position_threshold_m: thresholds[1],
            rows,
        })
    }
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EvalReport::from_text(&text, path)
}

/// Per-image CSV: `config,image_id,status,dR_deg,dt_m`.
pub fn write_per_image_csv(images: &[ImageResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("config,image_id,status,dR_deg,dt_m\n");
    for r in images {
        let (dr, dt) = r.errors.map_or((f64::NAN, f64::NAN), |e| (e.rotation_deg, e.position_m));
        writeln!(out, "{},{},{},{},{}", r.config, r.image_id, r.status, dr, dt).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
