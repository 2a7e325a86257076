//! Reader and writer for the COLMAP text export (`cameras.txt`, `images.txt`,
//! `points3D.txt`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};

use super::{Image, Intrinsics, Observation, Pose, SceneModel, TrackPoint};
use crate::error::{Error, Result};

const CAMERAS: &str = "cameras.txt";
const IMAGES: &str = "images.txt";
const POINTS: &str = "points3D.txt";

/// Loads a reconstruction directory.
pub fn load_scene(dir: impl AsRef<Path>) -> Result<SceneModel> {
    let dir = dir.as_ref();
    let cameras = parse_cameras(&dir.join(CAMERAS))?;
    let (images, keypoints) = parse_images(&dir.join(IMAGES), &cameras)?;
    let points = parse_points(&dir.join(POINTS), &images, &keypoints)?;
    SceneModel::new(cameras, images, points)
}

/// Writes `model` as a COLMAP text reconstruction into `dir` (created if needed).
pub fn write_scene(model: &SceneModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut cams = String::from("# Camera list with one line of data per camera:\n");
    cams.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    for (id, k) in model.cameras() {
        writeln!(cams, "{id} PINHOLE {} {} {} {} {} {}", k.width, k.height, k.fx, k.fy, k.cx, k.cy).unwrap();
    }

    // keypoint lists per image, in point-id then observation order
    let mut keypoints: BTreeMap<u32, Vec<(Vector2<f64>, u64)>> = BTreeMap::new();
    let mut tracks: BTreeMap<u64, Vec<(u32, usize)>> = BTreeMap::new();
    for (pid, point) in model.points() {
        for obs in &point.observations {
            let list = keypoints.entry(obs.image_id).or_default();
            tracks.entry(*pid).or_default().push((obs.image_id, list.len()));
            list.push((obs.uv, *pid));
        }
    }

    let mut imgs = String::from("# Image list with two lines of data per image:\n");
    imgs.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    imgs.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for (id, image) in model.images() {
        let q = image.pose.quaternion();
        let t = image.pose.translation();
        writeln!(
            imgs,
            "{id} {} {} {} {} {} {} {} {} {}",
            q[0], q[1], q[2], q[3], t.x, t.y, t.z, image.camera_id, image.name
        )
        .unwrap();
        let line: Vec<String> = keypoints
            .get(id)
            .map(|kps| kps.iter().map(|(uv, pid)| format!("{} {} {pid}", uv.x, uv.y)).collect())
            .unwrap_or_default();
        imgs.push_str(&line.join(" "));
        imgs.push('\n');
    }

    let mut pts = String::from("# 3D point list with one line of data per point:\n");
    pts.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for (pid, point) in model.points() {
        let rgb = point.rgb.unwrap_or([128, 128, 128]);
        write!(
            pts,
            "{pid} {} {} {} {} {} {} 0",
            point.xyz.x, point.xyz.y, point.xyz.z, rgb[0], rgb[1], rgb[2]
        )
        .unwrap();
        for (image_id, idx) in &tracks[pid] {
            write!(pts, " {image_id} {idx}").unwrap();
        }
        pts.push('\n');
    }

    for (name, body) in [(CAMERAS, cams), (IMAGES, imgs), (POINTS, pts)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

struct Fields<'a> {
    file: &'a Path,
    line: usize,
    tokens: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn new(file: &'a Path, line: usize, text: &'a str) -> Self {
        Fields {
            file,
            line,
            tokens: text.split_whitespace(),
        }
    }

    fn next<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self
            .tokens
            .next()
            .ok_or_else(|| Error::parse(self.file, self.line, format!("missing {what}")))?;
        tok.parse()
            .map_err(|_| Error::parse(self.file, self.line, format!("invalid {what} `{tok}`")))
    }

    fn rest(&mut self) -> Vec<&'a str> {
        self.tokens.by_ref().collect()
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
}

fn parse_cameras(path: &Path) -> Result<BTreeMap<u32, Intrinsics>> {
    let text = read(path)?;
    let mut cameras = BTreeMap::new();
    for (line, l) in data_lines(&text).filter(|(_, l)| !l.is_empty()) {
        let mut f = Fields::new(path, line, l);
        let id: u32 = f.next("camera id")?;
        let model: String = f.next("camera model")?;
        let width: u32 = f.next("width")?;
        let height: u32 = f.next("height")?;
        let (fx, fy, cx, cy) = match model.as_str() {
            "PINHOLE" => (f.next("fx")?, f.next("fy")?, f.next("cx")?, f.next("cy")?),
            "SIMPLE_PINHOLE" => {
                let focal: f64 = f.next("focal length")?;
                (focal, focal, f.next("cx")?, f.next("cy")?)
            }
            other => return Err(Error::UnsupportedCameraModel(other.to_string())),
        };
        let k = Intrinsics::new(fx, fy, cx, cy, width, height)
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        if cameras.insert(id, k).is_some() {
            return Err(Error::parse(path, line, format!("duplicate camera id {id}")));
        }
    }
    Ok(cameras)
}

type Keypoints = BTreeMap<u32, Vec<Vector2<f64>>>;

fn parse_images(path: &Path, cameras: &BTreeMap<u32, Intrinsics>) -> Result<(BTreeMap<u32, Image>, Keypoints)> {
    let text = read(path)?;
    let mut images = BTreeMap::new();
    let mut keypoints = BTreeMap::new();
    let mut lines = data_lines(&text);
    while let Some((line, l)) = lines.next() {
        if l.is_empty() {
            continue;
        }
        let mut f = Fields::new(path, line, l);
        let id: u32 = f.next("image id")?;
        let q = [f.next("qw")?, f.next("qx")?, f.next("qy")?, f.next("qz")?];
        let t = Vector3::new(f.next("tx")?, f.next("ty")?, f.next("tz")?);
        let camera_id: u32 = f.next("camera id")?;
        let name = f.rest().join(" ");
        if name.is_empty() {
            return Err(Error::parse(path, line, "missing image name"));
        }
        if !cameras.contains_key(&camera_id) {
            return Err(Error::DanglingReference(format!(
                "{}:{line}: image {id} references missing camera {camera_id}",
                path.display()
            )));
        }
        let pose = Pose::from_quaternion(q, t).map_err(|e| Error::parse(path, line, e.to_string()))?;

        // the keypoint line may be empty but must be present
        let (kp_line, kp) = lines
            .next()
            .ok_or_else(|| Error::parse(path, line, "missing POINTS2D line"))?;
        let tokens: Vec<&str> = kp.split_whitespace().collect();
        if !tokens.len().is_multiple_of(3) {
            return Err(Error::parse(path, kp_line, "POINTS2D entries must be (X, Y, POINT3D_ID) triples"));
        }
        let mut uvs = Vec::with_capacity(tokens.len() / 3);
        for triple in tokens.chunks(3) {
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(path, kp_line, format!("invalid keypoint coordinate `{s}`")))
            };
            triple[2]
                .parse::<i64>()
                .map_err(|_| Error::parse(path, kp_line, format!("invalid point3D id `{}`", triple[2])))?;
            uvs.push(Vector2::new(parse(triple[0])?, parse(triple[1])?));
        }
        if images
            .insert(
                id,
                Image {
                    id,
                    camera_id,
                    name,
                    pose,
                },
            )
            .is_some()
        {
            return Err(Error::parse(path, line, format!("duplicate image id {id}")));
        }
        keypoints.insert(id, uvs);
    }
    Ok((images, keypoints))
}

fn parse_points(
    path: &Path,
    images: &BTreeMap<u32, Image>,
    keypoints: &Keypoints,
) -> Result<BTreeMap<u64, TrackPoint>> {
    let text = read(path)?;
    let mut points = BTreeMap::new();
    for (line, l) in data_lines(&text).filter(|(_, l)| !l.is_empty()) {
        let mut f = Fields::new(path, line, l);
        let id: u64 = f.next("point id")?;
        let xyz = Vector3::new(f.next("x")?, f.next("y")?, f.next("z")?);
        let rgb = [f.next("r")?, f.next("g")?, f.next("b")?];
        let _error: f64 = f.next("error")?;
        let track = f.rest();
        if !track.len().is_multiple_of(2) {
            return Err(Error::parse(path, line, "track entries must be (IMAGE_ID, POINT2D_IDX) pairs"));
        }
        if track.is_empty() {
            return Err(Error::parse(path, line, format!("point {id} has an empty track")));
        }
        let mut observations = Vec::with_capacity(track.len() / 2);
        for pair in track.chunks(2) {
            let image_id: u32 = pair[0]
                .parse()
                .map_err(|_| Error::parse(path, line, format!("invalid image id `{}`", pair[0])))?;
            let idx: usize = pair[1]
                .parse()
                .map_err(|_| Error::parse(path, line, format!("invalid point2D index `{}`", pair[1])))?;
            if !images.contains_key(&image_id) {
                return Err(Error::DanglingReference(format!(
                    "{}:{line}: point {id} references missing image {image_id}",
                    path.display()
                )));
            }
            let uv = keypoints.get(&image_id).and_then(|k| k.get(idx)).ok_or_else(|| {
                Error::DanglingReference(format!(
                    "{}:{line}: point {id} references missing keypoint {idx} of image {image_id}",
                    path.display()
                ))
            })?;
            observations.push(Observation { image_id, uv: *uv });
        }
        let point = TrackPoint {
            id,
            xyz,
            observations,
            rgb: Some(rgb),
        };
        if points.insert(id, point).is_some() {
            return Err(Error::parse(path, line, format!("duplicate point id {id}")));
        }
    }
    Ok(points)
}
