//! Landmark visibility from dense geometry.
//!
//! Each image's depth and normals are rasterized from a registered mesh. A
//! landmark counts as visible in an image when it lies in front of the
//! camera inside the frame, its depth agrees with the rasterized depth at
//! its projection, and the rasterized surface normal there agrees with the
//! landmark's own surface normal.

mod affine;
mod mesh;
mod raster;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

pub use affine::{
    estimate_affine_alignment, filter_registration, mean_depth_residuals, AffineTransform, RegistrationFilter,
    RegistrationParams,
};
pub use mesh::{
    box_mesh, closest_point_on_triangle, load_mesh, moller_trumbore, write_obj, write_ply, RayHit, SurfacePoint,
    TriangleMesh,
};
pub use raster::{rasterize_depth, rasterize_depth_decimated, DepthMap};

use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::scene::{project, Intrinsics, Pose, SceneModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityTolerances {
    /// Absolute depth tolerance in meters.
    pub depth_abs: f64,
    /// Depth tolerance as a fraction of the landmark depth.
    pub depth_rel: f64,
    /// Maximum angle between rasterized and reference normals.
    pub normal_deg: f64,
}

impl Default for VisibilityTolerances {
    fn default() -> Self {
        VisibilityTolerances {
            depth_abs: 0.05,
            depth_rel: 0.01,
            normal_deg: 30.0,
        }
    }
}

impl VisibilityTolerances {
    pub fn depth_tolerance(&self, z: f64) -> f64 {
        self.depth_abs.max(self.depth_rel * z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityParams {
    pub tolerances: VisibilityTolerances,
    /// Landmarks farther than this from the mesh are excluded.
    pub max_surface_distance: f64,
    /// Depth maps are rasterized at `1 / decimation` resolution.
    pub decimation: u32,
}

impl Default for VisibilityParams {
    fn default() -> Self {
        VisibilityParams {
            tolerances: VisibilityTolerances::default(),
            max_surface_distance: 0.2,
            decimation: 1,
        }
    }
}

/// Flips `n` to face the camera at the origin, as seen from camera-frame point `p`.
fn facing_camera(n: Vector3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    if n.dot(p) > 0.0 {
        -n
    } else {
        n
    }
}

/// Evaluates the three visibility conditions for one landmark.
///
/// `reference_normal` is the landmark's surface normal in world
/// coordinates; normals are compared as undirected lines, each oriented
/// toward the camera.
pub fn is_visible(
    p: &Vector3<f64>,
    k: &Intrinsics,
    pose: &Pose,
    dm: &DepthMap,
    tolerances: &VisibilityTolerances,
    reference_normal: &Vector3<f64>,
) -> bool {
    let pc = pose.transform(p);
    if pc.z <= 0.0 || project(k, pose, p).is_none() {
        return false;
    }
    let dk = dm.intrinsics();
    let uv = Vector2::new(dk.fx * pc.x / pc.z + dk.cx, dk.fy * pc.y / pc.z + dk.cy);
    let (depth, normal) = dm.sample(&uv);
    if !depth.is_finite() || (depth - pc.z).abs() > tolerances.depth_tolerance(pc.z) {
        return false;
    }
    let reference = facing_camera(pose.rotation() * reference_normal, &pc);
    let cos = normal.dot(&reference).clamp(-1.0, 1.0);
    cos.acos().to_degrees() <= tolerances.normal_deg
}

/// Boolean landmark × image matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityTable {
    landmarks: Vec<u32>,
    images: Vec<u32>,
    bits: Vec<bool>,
    tolerances: Option<VisibilityTolerances>,
    excluded: BTreeSet<u32>,
}

impl VisibilityTable {
    /// All-invisible table. `tolerances` is `None` for exact ground truth.
    pub fn new(landmarks: BTreeSet<u32>, images: BTreeSet<u32>, tolerances: Option<VisibilityTolerances>) -> Self {
        let bits = vec![false; landmarks.len() * images.len()];
        VisibilityTable {
            landmarks: landmarks.into_iter().collect(),
            images: images.into_iter().collect(),
            bits,
            tolerances,
            excluded: BTreeSet::new(),
        }
    }

    fn index(&self, landmark: u32, image: u32) -> Option<usize> {
        let l = self.landmarks.binary_search(&landmark).ok()?;
        let i = self.images.binary_search(&image).ok()?;
        Some(l * self.images.len() + i)
    }

    pub fn set(&mut self, landmark: u32, image: u32, visible: bool) -> Result<()> {
        if self.landmarks.binary_search(&landmark).is_err() {
            return Err(Error::UnknownLandmark(landmark));
        }
        let idx = self
            .index(landmark, image)
            .ok_or_else(|| Error::InvalidInput(format!("image {image} not in visibility table")))?;
        self.bits[idx] = visible;
        Ok(())
    }

    /// Marks a landmark as excluded; it stays in the table with no visible images.
    pub fn exclude(&mut self, landmark: u32) -> Result<()> {
        let l = self
            .landmarks
            .binary_search(&landmark)
            .map_err(|_| Error::UnknownLandmark(landmark))?;
        let n = self.images.len();
        self.bits[l * n..(l + 1) * n].fill(false);
        self.excluded.insert(landmark);
        Ok(())
    }

    /// False for ids not in the table.
    pub fn is_visible(&self, landmark: u32, image: u32) -> bool {
        self.index(landmark, image).is_some_and(|i| self.bits[i])
    }

    pub fn landmark_ids(&self) -> &[u32] {
        &self.landmarks
    }

    pub fn image_ids(&self) -> &[u32] {
        &self.images
    }

    pub fn tolerances(&self) -> Option<&VisibilityTolerances> {
        self.tolerances.as_ref()
    }

    pub fn excluded(&self) -> &BTreeSet<u32> {
        &self.excluded
    }

    pub fn visible_images(&self, landmark: u32) -> Vec<u32> {
        let Ok(l) = self.landmarks.binary_search(&landmark) else {
            return Vec::new();
        };
        let n = self.images.len();
        self.images
            .iter()
            .zip(&self.bits[l * n..(l + 1) * n])
            .filter(|(_, b)| **b)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn visible_landmarks(&self, image: u32) -> Vec<u32> {
        let Ok(i) = self.images.binary_search(&image) else {
            return Vec::new();
        };
        let n = self.images.len();
        self.landmarks
            .iter()
            .enumerate()
            .filter(|(l, _)| self.bits[l * n + i])
            .map(|(_, id)| *id)
            .collect()
    }

    pub fn count_visible(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn pair_count(&self) -> usize {
        self.bits.len()
    }

    /// Pairs on which two tables over the same ids disagree.
    pub fn disagreements(&self, other: &VisibilityTable) -> Result<Vec<(u32, u32)>> {
        if self.landmarks != other.landmarks || self.images != other.images {
            return Err(Error::InvalidInput("visibility tables cover different ids".into()));
        }
        let n = self.images.len();
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(k, _)| (self.landmarks[k / n], self.images[k % n]))
            .collect())
    }

    /// True when every visible pair here is also visible in `other`.
    pub fn is_subset_of(&self, other: &VisibilityTable) -> bool {
        self.landmarks == other.landmarks
            && self.images == other.images
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VisibilityDiagnostics {
    /// Excluded landmarks with their distance to the mesh.
    pub excluded: BTreeMap<u32, f64>,
    pub visible_pairs: usize,
}

/// Visibility of every landmark in every image of `model`.
///
/// Each landmark's reference normal comes from the mesh triangle closest to
/// it; landmarks farther than `max_surface_distance` from the mesh are
/// excluded. Images are processed in parallel.
pub fn compute_visibility(
    model: &SceneModel,
    mesh: &TriangleMesh,
    ls: &LandmarkSet,
    params: &VisibilityParams,
) -> Result<(VisibilityTable, VisibilityDiagnostics)> {
    let landmark_ids: BTreeSet<u32> = ls.landmarks().iter().map(|l| l.id).collect();
    let image_ids: BTreeSet<u32> = model.images().keys().copied().collect();
    let mut table = VisibilityTable::new(landmark_ids, image_ids, Some(params.tolerances));
    let mut diagnostics = VisibilityDiagnostics::default();
    if ls.is_empty() {
        return Ok((table, diagnostics));
    }
    if mesh.is_empty() {
        return Err(Error::InvalidInput("mesh has no triangles".into()));
    }

    let mut references = Vec::with_capacity(ls.len());
    for lm in ls.landmarks() {
        let surface = mesh.closest_point(&lm.xyz).expect("mesh is non-empty");
        if surface.distance > params.max_surface_distance {
            diagnostics.excluded.insert(lm.id, surface.distance);
        } else {
            references.push((lm.id, lm.xyz, mesh.face_normal(surface.triangle)));
        }
    }

    let columns: Vec<(u32, Vec<u32>)> = model
        .images()
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|image| {
            let k = model.intrinsics_of(image.id).expect("model is cross-referenced");
            let dm = rasterize_depth_decimated(mesh, k, &image.pose, params.decimation);
            let visible = references
                .iter()
                .filter(|(_, p, n)| is_visible(p, k, &image.pose, &dm, &params.tolerances, n))
                .map(|(id, _, _)| *id)
                .collect();
            (image.id, visible)
        })
        .collect();

    for (image, visible) in columns {
        for lm in visible {
            table.set(lm, image, true)?;
        }
    }
    for id in diagnostics.excluded.keys() {
        table.exclude(*id)?;
    }
    diagnostics.visible_pairs = table.count_visible();
    Ok((table, diagnostics))
}

const MAGIC: &str = "# visibility v1";

pub fn write_visibility(table: &VisibilityTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "dims {} {}", table.landmarks.len(), table.images.len()).unwrap();
    match &table.tolerances {
        Some(t) => writeln!(out, "tolerances {} {} {}", t.depth_abs, t.depth_rel, t.normal_deg).unwrap(),
        None => writeln!(out, "tolerances exact").unwrap(),
    }
    let join = |ids: &mut dyn Iterator<Item = u32>| ids.map(|i| format!(" {i}")).collect::<String>();
    writeln!(out, "images{}", join(&mut table.images.iter().copied())).unwrap();
    writeln!(out, "excluded{}", join(&mut table.excluded.iter().copied())).unwrap();
    for lm in &table.landmarks {
        writeln!(out, "{lm}{}", join(&mut table.visible_images(*lm).into_iter())).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_visibility(path: impl AsRef<Path>) -> Result<VisibilityTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::parse(path, text.lines().count() + 1, format!("missing {what}")))
    };
    let (_, magic) = next("header")?;
    if magic.trim() != MAGIC {
        return Err(Error::parse(path, 1, format!("expected `{MAGIC}`")));
    }

    let ids = |line: usize, toks: &[&str]| -> Result<Vec<u32>> {
        toks.iter()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::parse(path, line, format!("invalid id `{t}`")))
            })
            .collect()
    };
    let keyed = |(i, line): (usize, &str), key: &str| -> Result<Vec<String>> {
        let mut toks = line.split_whitespace();
        if toks.next() != Some(key) {
            return Err(Error::parse(path, i + 1, format!("expected `{key}` line")));
        }
        Ok(toks.map(String::from).collect())
    };

    let (i, line) = next("dims")?;
    let dims = keyed((i, line), "dims")?;
    let dims: Vec<usize> = dims
        .iter()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .ok()
        .filter(|d: &Vec<usize>| d.len() == 2)
        .ok_or_else(|| Error::parse(path, i + 1, "expected `dims <landmarks> <images>`"))?;

    let (i, line) = next("tolerances")?;
    let tol = keyed((i, line), "tolerances")?;
    let tolerances = match tol.as_slice() {
        [e] if e == "exact" => None,
        [a, r, n] => {
            let f = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(path, i + 1, format!("invalid tolerance `{s}`")));
            Some(VisibilityTolerances {
                depth_abs: f(a)?,
                depth_rel: f(r)?,
                normal_deg: f(n)?,
            })
        }
        _ => return Err(Error::parse(path, i + 1, "expected three tolerances or `exact`")),
    };

    let (i, line) = next("images")?;
    let toks = keyed((i, line), "images")?;
    let images = ids(i + 1, &toks.iter().map(String::as_str).collect::<Vec<_>>())?;
    if images.len() != dims[1] {
        return Err(Error::parse(path, i + 1, format!("{} image ids, dims say {}", images.len(), dims[1])));
    }
    let (i, line) = next("excluded")?;
    let toks = keyed((i, line), "excluded")?;
    let excluded = ids(i + 1, &toks.iter().map(String::as_str).collect::<Vec<_>>())?;

    let mut rows: Vec<(usize, u32, Vec<u32>)> = Vec::new();
    for (i, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let parsed = ids(i + 1, &toks)?;
        rows.push((i + 1, parsed[0], parsed[1..].to_vec()));
    }
    if rows.len() != dims[0] {
        return Err(Error::parse(path, 2, format!("{} landmark rows, dims say {}", rows.len(), dims[0])));
    }

    let image_set: BTreeSet<u32> = images.iter().copied().collect();
    let landmark_set: BTreeSet<u32> = rows.iter().map(|(_, id, _)| *id).collect();
    if image_set.len() != images.len() || landmark_set.len() != rows.len() {
        return Err(Error::parse(path, 2, "duplicate ids"));
    }
    let mut table = VisibilityTable::new(landmark_set, image_set, tolerances);
    for (line, lm, visible) in rows {
        for img in visible {
            table
                .set(lm, img, true)
                .map_err(|_| Error::parse(path, line, format!("image {img} not listed in header")))?;
        }
    }
    for id in excluded {
        table.exclude(id).map_err(|_| Error::parse(path, 5, format!("excluded landmark {id} has no row")))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::Landmark;
    use crate::scene::{Image, TrackPoint};
    use proptest::prelude::*;

    fn k() -> Intrinsics {
        Intrinsics::new(80.0, 80.0, 39.5, 29.5, 80, 60).unwrap()
    }

    fn wall_scene() -> TriangleMesh {
        // room 6 × 6 × 3 centred on the origin in x/y
        box_mesh(&Vector3::new(-3.0, -3.0, 0.0), &Vector3::new(3.0, 3.0, 3.0), true)
    }

    fn pose_at(center: Vector3<f64>, target: Vector3<f64>) -> Pose {
        Pose::look_at(&center, &target, &Vector3::z()).unwrap()
    }

    #[test]
    fn behind_camera_fails() {
        let mesh = wall_scene();
        let pose = pose_at(Vector3::new(0.0, 0.0, 1.5), Vector3::new(0.0, 3.0, 1.5));
        let dm = rasterize_depth(&mesh, &k(), &pose);
        let p = Vector3::new(0.0, -3.0, 1.5);
        assert!(!is_visible(&p, &k(), &pose, &dm, &Default::default(), &Vector3::y()));
    }

    #[test]
    fn wall_landmark_visible_then_occluded() {
        let mut mesh = wall_scene();
        let pose = pose_at(Vector3::new(0.0, 1.0, 1.5), Vector3::new(0.0, 3.0, 1.5));
        let p = Vector3::new(0.1, 3.0, 1.4);
        let dm = rasterize_depth(&mesh, &k(), &pose);
        assert!(is_visible(&p, &k(), &pose, &dm, &Default::default(), &Vector3::y()));
        // a box at depth 1 between camera and wall
        mesh.merge(&box_mesh(&Vector3::new(-0.5, 1.9, 1.0), &Vector3::new(0.5, 2.1, 2.0), false));
        let dm = rasterize_depth(&mesh, &k(), &pose);
        let (d, _) = dm.sample(&project(&k(), &pose, &p).unwrap());
        assert!((d - 0.9).abs() < 1e-9);
        assert!(!is_visible(&p, &k(), &pose, &dm, &Default::default(), &Vector3::y()));
    }

    #[test]
    fn normal_condition_rejects_wrong_surface() {
        let mesh = wall_scene();
        let pose = pose_at(Vector3::new(0.0, 1.0, 1.5), Vector3::new(0.0, 3.0, 1.5));
        let dm = rasterize_depth(&mesh, &k(), &pose);
        let p = Vector3::new(0.1, 3.0, 1.4);
        let tilted = Vector3::new(1.0, 1.0, 0.0).normalize();
        assert!(!is_visible(&p, &k(), &pose, &dm, &Default::default(), &tilted));
        let loose = VisibilityTolerances {
            normal_deg: 46.0,
            ..Default::default()
        };
        assert!(is_visible(&p, &k(), &pose, &dm, &loose, &tilted));
        // orientation of the reference normal is irrelevant
        assert!(is_visible(&p, &k(), &pose, &dm, &Default::default(), &-Vector3::y()));
    }

    /// Slab-method ray cast against axis-aligned boxes: returns the nearest
    /// entry or exit distance along a unit ray.
    fn slab_hit(o: &Vector3<f64>, d: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < lo[a] || o[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        if t0 > t1 {
            return None;
        }
        [t0, t1].into_iter().filter(|t| *t > 1e-9).reduce(f64::min)
    }

    fn model_with(poses: &[Pose]) -> SceneModel {
        let images = poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let id = i as u32 + 1;
                (
                    id,
                    Image {
                        id,
                        camera_id: 1,
                        name: format!("{id}"),
                        pose: *p,
                    },
                )
            })
            .collect();
        SceneModel::new(BTreeMap::from([(1, k())]), images, BTreeMap::<u64, TrackPoint>::new()).unwrap()
    }

    fn landmarks(points: &[Vector3<f64>]) -> LandmarkSet {
        LandmarkSet::new(
            points
                .iter()
                .enumerate()
                .map(|(i, p)| Landmark {
                    id: i as u32,
                    source_point_id: i as u64,
                    xyz: *p,
                    saliency: 1.0,
                })
                .collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn room_scene_matches_slab_ray_cast() {
        let room = (Vector3::new(-3.0, -3.0, 0.0), Vector3::new(3.0, 3.0, 3.0));
        let mesh = box_mesh(&room.0, &room.1, true);
        let mut poses = Vec::new();
        for i in 0..24 {
            let a = i as f64 * std::f64::consts::TAU / 24.0;
            let c = Vector3::new(0.5 * a.cos(), 0.5 * a.sin(), 1.5);
            poses.push(pose_at(c, c + Vector3::new(a.cos(), a.sin(), 0.1 * (i % 3) as f64 - 0.1)));
        }
        let pts = vec![
            Vector3::new(0.3, 3.0, 1.2),
            Vector3::new(3.0, -0.7, 2.0),
            Vector3::new(-1.0, -3.0, 0.8),
            Vector3::new(-3.0, 1.5, 1.5),
        ];
        let model = model_with(&poses);
        let (table, diag) = compute_visibility(&model, &mesh, &landmarks(&pts), &Default::default()).unwrap();
        assert!(diag.excluded.is_empty());
        let mut visible = 0;
        for (l, p) in pts.iter().enumerate() {
            for (i, pose) in poses.iter().enumerate() {
                let c = pose.center();
                let dist = (p - c).norm();
                let hit = slab_hit(&c, &((p - c) / dist), &room.0, &room.1).unwrap();
                let want = project(&k(), pose, p).is_some() && (hit - dist).abs() < 1e-6;
                assert_eq!(table.is_visible(l as u32, i as u32 + 1), want, "landmark {l} image {}", i + 1);
                visible += usize::from(want);
            }
        }
        assert!(visible > 4);
    }

    #[test]
    fn far_landmarks_are_excluded() {
        let mesh = wall_scene();
        let model = model_with(&[pose_at(Vector3::new(0.0, 0.0, 1.5), Vector3::new(0.0, 3.0, 1.5))]);
        let pts = [Vector3::new(0.0, 2.95, 1.5), Vector3::new(0.0, 2.0, 1.5)];
        let (table, diag) = compute_visibility(&model, &mesh, &landmarks(&pts), &Default::default()).unwrap();
        assert!(table.is_visible(0, 1));
        assert!(!table.is_visible(1, 1));
        assert_eq!(diag.excluded.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert!((diag.excluded[&1] - 1.0).abs() < 1e-12);
        assert!(table.excluded().contains(&1));
    }

    #[test]
    fn empty_landmark_set() {
        let model = model_with(&[Pose::identity()]);
        let (table, _) = compute_visibility(&model, &wall_scene(), &LandmarkSet::empty(), &Default::default()).unwrap();
        assert_eq!(table.pair_count(), 0);
        assert!(table.landmark_ids().is_empty());
    }

    fn occluded_scene() -> (TriangleMesh, SceneModel, LandmarkSet) {
        let mut mesh = wall_scene();
        mesh.merge(&box_mesh(&Vector3::new(-1.0, 0.5, 0.0), &Vector3::new(0.0, 1.5, 1.2), false));
        mesh.merge(&box_mesh(&Vector3::new(1.0, -2.0, 0.0), &Vector3::new(1.8, -1.0, 2.0), false));
        let mut poses = Vec::new();
        for i in 0..12 {
            let a = i as f64 * 0.53;
            let c = Vector3::new(1.5 * a.cos(), 1.5 * a.sin() - 0.5, 1.0 + 0.1 * i as f64);
            poses.push(pose_at(c, Vector3::new(3.0 * (a + 2.0).cos(), 3.0 * (a + 2.0).sin(), 1.0)));
        }
        let mut pts = Vec::new();
        for i in 0..30 {
            let s = i as f64 / 30.0 * 5.6 - 2.8;
            let z = 0.2 + (i % 7) as f64 * 0.35;
            pts.push(match i % 4 {
                0 => Vector3::new(s, 3.0, z),
                1 => Vector3::new(3.0, s, z),
                2 => Vector3::new(-s, -3.0, z),
                _ => Vector3::new(-3.0, -s, z),
            });
        }
        (mesh, model_with(&poses), landmarks(&pts))
    }

    #[test]
    fn table_is_monotone_in_depth_tolerance() {
        let (mesh, model, ls) = occluded_scene();
        let tight = VisibilityParams::default();
        let mut loose = tight;
        loose.tolerances.depth_abs = 0.10;
        let (a, _) = compute_visibility(&model, &mesh, &ls, &tight).unwrap();
        let (b, _) = compute_visibility(&model, &mesh, &ls, &loose).unwrap();
        assert!(a.count_visible() > 0);
        assert!(a.is_subset_of(&b));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn monotone_in_both_tolerances(
            abs in 0.0f64..0.3, rel in 0.0f64..0.05, deg in 0.0f64..90.0,
            d_abs in 0.0f64..0.3, d_rel in 0.0f64..0.05, d_deg in 0.0f64..60.0,
        ) {
            let (mesh, model, ls) = occluded_scene();
            let small = VisibilityParams {
                tolerances: VisibilityTolerances { depth_abs: abs, depth_rel: rel, normal_deg: deg },
                ..Default::default()
            };
            let large = VisibilityParams {
                tolerances: VisibilityTolerances { depth_abs: abs + d_abs, depth_rel: rel + d_rel, normal_deg: deg + d_deg },
                ..Default::default()
            };
            let (a, _) = compute_visibility(&model, &mesh, &ls, &small).unwrap();
            let (b, _) = compute_visibility(&model, &mesh, &ls, &large).unwrap();
            prop_assert!(a.is_subset_of(&b));
        }
    }

    #[test]
    fn computation_is_deterministic() {
        let (mesh, model, ls) = occluded_scene();
        let a = compute_visibility(&model, &mesh, &ls, &Default::default()).unwrap();
        let b = compute_visibility(&model, &mesh, &ls, &Default::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_roundtrip() {
        let (mesh, model, ls) = occluded_scene();
        let (mut table, _) = compute_visibility(&model, &mesh, &ls, &Default::default()).unwrap();
        table.exclude(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vis.txt");
        write_visibility(&table, &path).unwrap();
        assert_eq!(read_visibility(&path).unwrap(), table);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# visibility v1\ndims 30 12\ntolerances 0.05 0.01 30\nimages 1 2 3"));

        let exact = VisibilityTable::new(BTreeSet::from([4, 9]), BTreeSet::from([2]), None);
        write_visibility(&exact, &path).unwrap();
        assert_eq!(read_visibility(&path).unwrap(), exact);
    }

    #[test]
    fn malformed_visibility_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vis.txt");
        fs::write(&path, "# visibility v1\ndims 1 1\ntolerances exact\nimages 1\nexcluded\n0 2\n").unwrap();
        assert!(matches!(read_visibility(&path), Err(Error::Parse { line: 6, .. })));
        fs::write(&path, "# visibility v1\ndims 2 1\ntolerances exact\nimages 1\nexcluded\n0 1\n").unwrap();
        assert!(matches!(read_visibility(&path), Err(Error::Parse { .. })));
    }
}
