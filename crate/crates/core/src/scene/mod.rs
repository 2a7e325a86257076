//! Core geometric types shared by every stage: pinhole intrinsics, rigid
//! world-to-camera poses, and the immutable SfM reconstruction.
//!
//! Poses map world points into the camera frame as `p_cam = R * p_world + t`;
//! the camera center is `-Rᵀ t`. Pixel centers sit at integer coordinates with
//! the origin at the top-left corner.

mod colmap;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

pub use colmap::{load_scene, write_scene};

/// Pinhole intrinsics together with the image extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive and finite, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside image {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// True if `uv` lies inside `[0, width) x [0, height)`.
    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < self.width as f64 && uv.y < self.height as f64
    }

    /// Intrinsics of the same camera sampled every `factor` pixels.
    ///
    /// A full-resolution coordinate `u` maps to `u / factor`, keeping pixel
    /// centers on integer coordinates at both resolutions.
    pub fn decimated(&self, factor: u32) -> Intrinsics {
        let s = factor.max(1) as f64;
        Intrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width.div_ceil(factor.max(1)),
            height: self.height.div_ceil(factor.max(1)),
        }
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-9;

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking `RᵀR = I` and `det R = 1` to within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= ROTATION_TOL && (det - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::InvalidInput(format!(
                "not a rotation matrix (orthogonality error {ortho:e}, det {det})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn from_rotation(rotation: &Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    /// Pose from a (not necessarily normalized) quaternion in `w x y z` order.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(raw.norm() > 0.0) || !q.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid quaternion {q:?}")));
        }
        let unit = UnitQuaternion::from_quaternion(raw);
        Pose::new(*unit.to_rotation_matrix().matrix(), translation)
    }

    /// Camera at `center` looking at `target`; image rows run along `-up`.
    pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<Self> {
        let forward = target - center;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidInput("look-at target coincides with center".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidInput("look-at direction parallel to up vector".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Unit quaternion `[w, x, y, z]` with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        [sign * q.w, sign * q.i, sign * q.j, sign * q.k]
    }

    /// Maps a world point into the camera frame.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// One 2D observation of a track point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub image_id: u32,
    pub uv: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackPoint {
    pub id: u64,
    pub xyz: Vector3<f64>,
    pub observations: Vec<Observation>,
    pub rgb: Option<[u8; 3]>,
}

impl TrackPoint {
    /// Number of observations.
    pub fn track_length(&self) -> usize {
        self.observations.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: u32,
    pub camera_id: u32,
    pub name: String,
    pub pose: Pose,
}

/// Immutable, fully cross-referenced SfM reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    cameras: BTreeMap<u32, Intrinsics>,
    images: BTreeMap<u32, Image>,
    points: BTreeMap<u64, TrackPoint>,
}

impl SceneModel {
    pub fn new(
        cameras: BTreeMap<u32, Intrinsics>,
        images: BTreeMap<u32, Image>,
        points: BTreeMap<u64, TrackPoint>,
    ) -> Result<Self> {
        for k in cameras.values() {
            k.validate()?;
        }
        for (id, image) in &images {
            if *id != image.id {
                return Err(Error::InvalidInput(format!("image keyed {id} carries id {}", image.id)));
            }
            if !cameras.contains_key(&image.camera_id) {
                return Err(Error::DanglingReference(format!(
                    "image {id} references missing camera {}",
                    image.camera_id
                )));
            }
        }
        for (id, point) in &points {
            if *id != point.id {
                return Err(Error::InvalidInput(format!("point keyed {id} carries id {}", point.id)));
            }
            if point.observations.is_empty() {
                return Err(Error::InvalidInput(format!("point {id} has no observations")));
            }
            if let Some(obs) = point.observations.iter().find(|o| !images.contains_key(&o.image_id)) {
                return Err(Error::DanglingReference(format!(
                    "point {id} observed in missing image {}",
                    obs.image_id
                )));
            }
        }
        Ok(SceneModel {
            cameras,
            images,
            points,
        })
    }

    pub fn cameras(&self) -> &BTreeMap<u32, Intrinsics> {
        &self.cameras
    }

    pub fn images(&self) -> &BTreeMap<u32, Image> {
        &self.images
    }

    pub fn points(&self) -> &BTreeMap<u64, TrackPoint> {
        &self.points
    }

    pub fn image(&self, id: u32) -> Option<&Image> {
        self.images.get(&id)
    }

    pub fn point(&self, id: u64) -> Option<&TrackPoint> {
        self.points.get(&id)
    }

    /// Intrinsics of the camera that took image `id`.
    pub fn intrinsics_of(&self, image_id: u32) -> Option<&Intrinsics> {
        self.images
            .get(&image_id)
            .and_then(|im| self.cameras.get(&im.camera_id))
    }
}

/// Projects a world point; `None` if it is behind the camera or outside the image.
pub fn project(k: &Intrinsics, pose: &Pose, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    let pc = pose.transform(p);
    if !(pc.z > 0.0) {
        return None;
    }
    let uv = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
    k.contains(&uv).then_some(uv)
}

/// Unit camera-frame ray through pixel `uv`.
pub fn bearing(k: &Intrinsics, uv: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new((uv.x - k.cx) / k.fx, (uv.y - k.cy) / k.fy, 1.0).normalize()
}
