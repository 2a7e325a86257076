//! Seeded synthetic indoor scenes.
//!
//! A room is an inward-facing axis-aligned box with box occluders standing
//! on the floor. Landmark sites lie on the walls and on the vertical faces
//! of the occluders.
//! Cameras aim at random wall points. Tracks and ground-truth visibility
//! come from exact projection and exact ray casting against the mesh.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::landmarks::{score_saliency, write_landmarks, Landmark, LandmarkSet};
use crate::scene::{project, write_scene, Image, Intrinsics, Observation, Pose, SceneModel, TrackPoint};
use crate::visibility::{box_mesh, write_ply, write_visibility, TriangleMesh, VisibilityTable};

/// Landmarks closer than this to a face edge are not generated.
pub const SITE_MARGIN: f64 = 0.1;
/// First hits within this distance of the landmark count as the landmark.
pub const RAY_EPSILON: f64 = 1e-6;
const WALL_CLEARANCE: f64 = 0.3;
const OCCLUDER_GAP: f64 = 0.2;
const CAMERA_CLEARANCE: f64 = 0.3;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        let m = Vector3::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    fn overlaps_xy(&self, other: &Aabb) -> bool {
        self.min.x < other.max.x && other.min.x < self.max.x && self.min.y < other.max.y && other.min.y < self.max.y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Room extent along x, y, z (z is up); the room spans `[0, room]`.
    pub room: Vector3<f64>,
    pub landmark_sites: usize,
    pub occluders: usize,
    /// Range of occluder footprint side lengths.
    pub occluder_footprint: (f64, f64),
    pub occluder_height: (f64, f64),
    pub cameras: usize,
    pub camera_height: (f64, f64),
    /// Minimum horizontal distance from cameras to the walls.
    pub camera_wall_clearance: f64,
    /// Cameras seeing fewer landmarks are resampled.
    pub min_visible_landmarks: usize,
    pub intrinsics: Intrinsics,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            room: Vector3::new(6.0, 4.0, 3.0),
            landmark_sites: 200,
            occluders: 6,
            occluder_footprint: (0.3, 0.9),
            occluder_height: (0.4, 1.6),
            cameras: 100,
            camera_height: (1.0, 2.0),
            camera_wall_clearance: 1.0,
            min_visible_landmarks: 20,
            intrinsics: Intrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).expect("valid intrinsics"),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi;
        if !(self.room.iter().all(|v| v.is_finite() && *v > 2.0 * (WALL_CLEARANCE + SITE_MARGIN))) {
            return Err(Error::InvalidInput(format!(
                "room dimensions must exceed {} m",
                2.0 * (WALL_CLEARANCE + SITE_MARGIN)
            )));
        }
        if !range_ok(self.occluder_footprint) || !range_ok(self.occluder_height) || !range_ok(self.camera_height) {
            return Err(Error::InvalidInput("size and height ranges need 0 < lo ≤ hi".into()));
        }
        if self.camera_height.1 >= self.room.z - CAMERA_CLEARANCE || self.camera_height.0 <= CAMERA_CLEARANCE {
            return Err(Error::InfeasibleConfig("camera heights leave the room".into()));
        }
        let wall = self.camera_wall_clearance;
        if !(wall >= CAMERA_CLEARANCE) || 2.0 * wall >= self.room.x.min(self.room.y) {
            return Err(Error::InfeasibleConfig(format!(
                "camera wall clearance {wall} must lie in [{CAMERA_CLEARANCE}, half the room width)"
            )));
        }
        if self.occluder_height.1 >= self.room.z {
            return Err(Error::InfeasibleConfig("occluders taller than the room".into()));
        }
        if self.occluders > 0 && self.occluder_footprint.0 < 2.0 * SITE_MARGIN {
            return Err(Error::InvalidInput(format!(
                "occluder footprint below {} m leaves no room for landmark sites",
                2.0 * SITE_MARGIN
            )));
        }
        let usable = (self.room.x - 2.0 * WALL_CLEARANCE) * (self.room.y - 2.0 * WALL_CLEARANCE);
        let needed = self.occluders as f64 * (self.occluder_footprint.0 + OCCLUDER_GAP).powi(2);
        if needed > usable {
            return Err(Error::InfeasibleConfig(format!(
                "{} occluders cannot fit on {usable:.2} m² of floor",
                self.occluders
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub config: SynthConfig,
    pub room: Aabb,
    pub occluders: Vec<Aabb>,
    pub mesh: TriangleMesh,
    pub model: SceneModel,
    /// One landmark per site, ids in generation order.
    pub gt_landmarks: LandmarkSet,
    /// Unit surface normal at each site, pointing into free space.
    pub site_normals: Vec<Vector3<f64>>,
    pub gt_visibility: VisibilityTable,
}

/// True when `xyz` projects into the image and the first surface hit from
/// the camera center toward it is the landmark itself.
pub fn raycast_visible(mesh: &TriangleMesh, k: &Intrinsics, pose: &Pose, xyz: &Vector3<f64>) -> bool {
    if project(k, pose, xyz).is_none() {
        return false;
    }
    let center = pose.center();
    let offset = xyz - center;
    let distance = offset.norm();
    match mesh.raycast(&center, &(offset / distance), 0.0) {
        Some(hit) => hit.distance >= distance - RAY_EPSILON,
        None => true,
    }
}

/// Ground-truth visibility of one landmark in one image of `scene`.
pub fn raycast_visibility_oracle(scene: &SynthScene, landmark: u32, image: u32) -> bool {
    let (Some(lm), Some(im), Some(k)) = (
        scene.gt_landmarks.get(landmark),
        scene.model.image(image),
        scene.model.intrinsics_of(image),
    ) else {
        return false;
    };
    raycast_visible(&scene.mesh, k, &im.pose, &lm.xyz)
}

struct Face {
    /// Fixed axis and its coordinate.
    axis: usize,
    at: f64,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    normal: Vector3<f64>,
}

impl Face {
    fn area(&self) -> f64 {
        let (u, v) = ((self.axis + 1) % 3, (self.axis + 2) % 3);
        (self.hi[u] - self.lo[u] - 2.0 * SITE_MARGIN).max(0.0) * (self.hi[v] - self.lo[v] - 2.0 * SITE_MARGIN).max(0.0)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let mut p = Vector3::zeros();
        for i in 0..3 {
            p[i] = if i == self.axis {
                self.at
            } else {
                rng.random_range(self.lo[i] + SITE_MARGIN..=self.hi[i] - SITE_MARGIN)
            };
        }
        p
    }
}

fn site_faces(room: &Aabb, occluders: &[Aabb]) -> Vec<Face> {
    let mut faces = Vec::new();
    for axis in 0..2 {
        for (at, sign) in [(room.min[axis], 1.0), (room.max[axis], -1.0)] {
            let mut normal = Vector3::zeros();
            normal[axis] = sign;
            faces.push(Face {
                axis,
                at,
                lo: room.min,
                hi: room.max,
                normal,
            });
        }
    }
    for b in occluders {
        for axis in 0..2 {
            for (at, sign) in [(b.min[axis], -1.0), (b.max[axis], 1.0)] {
                let mut normal = Vector3::zeros();
                normal[axis] = sign;
                faces.push(Face {
                    axis,
                    at,
                    lo: b.min,
                    hi: b.max,
                    normal,
                });
            }
        }
    }
    faces
}

fn place_occluders(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Aabb>> {
    let mut boxes: Vec<Aabb> = Vec::with_capacity(cfg.occluders);
    for _ in 0..cfg.occluders {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let sx = rng.random_range(cfg.occluder_footprint.0..=cfg.occluder_footprint.1);
            let sy = rng.random_range(cfg.occluder_footprint.0..=cfg.occluder_footprint.1);
            let h = rng.random_range(cfg.occluder_height.0..=cfg.occluder_height.1);
            let (x_hi, y_hi) = (cfg.room.x - WALL_CLEARANCE - sx, cfg.room.y - WALL_CLEARANCE - sy);
            if x_hi <= WALL_CLEARANCE || y_hi <= WALL_CLEARANCE {
                continue;
            }
            let x = rng.random_range(WALL_CLEARANCE..x_hi);
            let y = rng.random_range(WALL_CLEARANCE..y_hi);
            let b = Aabb {
                min: Vector3::new(x, y, 0.0),
                max: Vector3::new(x + sx, y + sy, h),
            };
            if boxes.iter().all(|o| !o.expanded(OCCLUDER_GAP).overlaps_xy(&b)) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleConfig(format!(
                "could not place {} non-overlapping occluders",
                cfg.occluders
            )));
        }
    }
    Ok(boxes)
}

fn random_wall_point(room: &Aabb, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let z = rng.random_range(room.min.z..room.max.z);
    let perimeter = 2.0 * (room.max.x - room.min.x + room.max.y - room.min.y);
    let mut s = rng.random_range(0.0..perimeter);
    let (w, d) = (room.max.x - room.min.x, room.max.y - room.min.y);
    if s < w {
        return Vector3::new(room.min.x + s, room.min.y, z);
    }
    s -= w;
    if s < d {
        return Vector3::new(room.max.x, room.min.y + s, z);
    }
    s -= d;
    if s < w {
        return Vector3::new(room.max.x - s, room.max.y, z);
    }
    s -= w;
    Vector3::new(room.min.x, room.max.y - s, z)
}

/// Generates a scene; identical configs give identical scenes.
pub fn generate_scene(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let room = Aabb {
        min: Vector3::zeros(),
        max: cfg.room,
    };
    let occluders = place_occluders(cfg, &mut rng)?;
    let mut mesh = box_mesh(&room.min, &room.max, true);
    for b in &occluders {
        mesh.merge(&box_mesh(&b.min, &b.max, false));
    }

    let faces = site_faces(&room, &occluders);
    let areas: Vec<f64> = faces.iter().map(Face::area).collect();
    let total: f64 = areas.iter().sum();
    let mut sites = Vec::with_capacity(cfg.landmark_sites);
    let mut site_normals = Vec::with_capacity(cfg.landmark_sites);
    for _ in 0..cfg.landmark_sites {
        let mut pick = rng.random_range(0.0..total);
        let mut f = 0;
        while f + 1 < faces.len() && pick >= areas[f] {
            pick -= areas[f];
            f += 1;
        }
        sites.push(faces[f].sample(&mut rng));
        site_normals.push(faces[f].normal);
    }

    let k = cfg.intrinsics;
    let mut poses = Vec::with_capacity(cfg.cameras);
    let mut visible: Vec<Vec<usize>> = Vec::with_capacity(cfg.cameras);
    for _ in 0..cfg.cameras {
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let c = Vector3::new(
                rng.random_range(cfg.camera_wall_clearance..cfg.room.x - cfg.camera_wall_clearance),
                rng.random_range(cfg.camera_wall_clearance..cfg.room.y - cfg.camera_wall_clearance),
                rng.random_range(cfg.camera_height.0..=cfg.camera_height.1),
            );
            let target = random_wall_point(&room, &mut rng);
            if occluders.iter().any(|b| b.expanded(CAMERA_CLEARANCE).contains(&c)) {
                continue;
            }
            let Ok(pose) = Pose::look_at(&c, &target, &Vector3::z()) else { continue };
            let seen: Vec<usize> = (0..sites.len())
                .filter(|i| raycast_visible(&mesh, &k, &pose, &sites[*i]))
                .collect();
            if seen.len() >= cfg.min_visible_landmarks.max(1) {
                accepted = Some((pose, seen));
                break;
            }
        }
        let (pose, seen) = accepted.ok_or_else(|| {
            Error::InfeasibleConfig(format!(
                "no camera pose sees {} landmarks after {MAX_ATTEMPTS} attempts",
                cfg.min_visible_landmarks
            ))
        })?;
        poses.push(pose);
        visible.push(seen);
    }

    let image_ids: Vec<u32> = (1..=cfg.cameras as u32).collect();
    let mut observations: BTreeMap<usize, Vec<Observation>> = BTreeMap::new();
    for (n, seen) in visible.iter().enumerate() {
        for &s in seen {
            let uv = project(&k, &poses[n], &sites[s]).expect("visible sites project");
            observations.entry(s).or_default().push(Observation {
                image_id: image_ids[n],
                uv,
            });
        }
    }
    let cameras = BTreeMap::from([(1u32, k)]);
    let images: BTreeMap<u32, Image> = image_ids
        .iter()
        .zip(&poses)
        .map(|(&id, pose)| {
            (
                id,
                Image {
                    id,
                    camera_id: 1,
                    name: format!("frame_{id:05}.png"),
                    pose: *pose,
                },
            )
        })
        .collect();
    let points: BTreeMap<u64, TrackPoint> = observations
        .into_iter()
        .map(|(s, obs)| {
            (
                s as u64,
                TrackPoint {
                    id: s as u64,
                    xyz: sites[s],
                    observations: obs,
                    rgb: Some([128, 128, 128]),
                },
            )
        })
        .collect();
    let model = SceneModel::new(cameras, images, points)?;

    let landmarks: Vec<Landmark> = sites
        .iter()
        .enumerate()
        .map(|(s, xyz)| Landmark {
            id: s as u32,
            source_point_id: s as u64,
            xyz: *xyz,
            saliency: model.point(s as u64).map_or(0.0, |p| score_saliency(p, &model)),
        })
        .collect();
    let gt_landmarks = LandmarkSet::new(landmarks, None)?;

    let mut gt_visibility = VisibilityTable::new(
        (0..sites.len() as u32).collect(),
        image_ids.iter().copied().collect(),
        None,
    );
    for (n, seen) in visible.iter().enumerate() {
        for &s in seen {
            gt_visibility.set(s as u32, image_ids[n], true)?;
        }
    }

    Ok(SynthScene {
        config: cfg.clone(),
        room,
        occluders,
        mesh,
        model,
        gt_landmarks,
        site_normals,
        gt_visibility,
    })
}

/// Writes `sparse/` (reconstruction text files), `mesh.ply`,
/// `landmarks.txt` and `visibility.txt` into `dir`.
pub fn write_synth(scene: &SynthScene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_scene(&scene.model, dir.join("sparse"))?;
    write_ply(&scene.mesh, dir.join("mesh.ply"))?;
    write_landmarks(&scene.gt_landmarks, dir.join("landmarks.txt"))?;
    write_visibility(&scene.gt_visibility, dir.join("visibility.txt"))
}

/// Ids of the landmarks that `scene` marks visible in at least one image.
pub fn observed_landmarks(scene: &SynthScene) -> BTreeSet<u32> {
    scene
        .gt_landmarks
        .landmarks()
        .iter()
        .map(|l| l.id)
        .filter(|id| !scene.gt_visibility.visible_images(*id).is_empty())
        .collect()
}
