//! Triangle meshes: ASCII PLY / OBJ input and output, ray casting and
//! closest-point queries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Triangles with less area than this are dropped at construction.
const MIN_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    dropped: usize,
}

/// Closest ray hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub triangle: usize,
}

/// Closest point on the mesh surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub point: Vector3<f64>,
    pub distance: f64,
    pub triangle: usize,
}

impl TriangleMesh {
    /// Validates indices and filters zero-area triangles.
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        if let Some(v) = vertices.iter().find(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("non-finite mesh vertex {v:?}")));
        }
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|i| *i as usize >= n)) {
            return Err(Error::InvalidInput(format!(
                "triangle {t:?} references a vertex outside 0..{n}"
            )));
        }
        let total = triangles.len();
        let triangles: Vec<[u32; 3]> = triangles
            .into_iter()
            .filter(|t| {
                let [a, b, c] = t.map(|i| vertices[i as usize]);
                0.5 * (b - a).cross(&(c - a)).norm() > MIN_AREA
            })
            .collect();
        let dropped = total - triangles.len();
        Ok(TriangleMesh {
            vertices,
            triangles,
            dropped,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    /// Number of degenerate triangles removed at construction.
    pub fn dropped_triangles(&self) -> usize {
        self.dropped
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, triangle: usize) -> [Vector3<f64>; 3] {
        self.triangles[triangle].map(|i| self.vertices[i as usize])
    }

    /// Unit normal following the winding order.
    pub fn face_normal(&self, triangle: usize) -> Vector3<f64> {
        let [a, b, c] = self.corners(triangle);
        (b - a).cross(&(c - a)).normalize()
    }

    /// Appends another mesh, re-indexing its triangles.
    pub fn merge(&mut self, other: &TriangleMesh) {
        let offset = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|i| i + offset)));
    }

    /// Closest intersection with `distance > min_distance` along `origin + s·dir`,
    /// where `distance` is measured in units of `|dir|`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, min_distance: f64) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.corners(i);
            if let Some(s) = moller_trumbore(origin, dir, &a, &b, &c) {
                if s > min_distance && best.is_none_or(|h| s < h.distance) {
                    best = Some(RayHit {
                        distance: s,
                        triangle: i,
                    });
                }
            }
        }
        best
    }

    /// Closest surface point to `p` by exhaustive search.
    pub fn closest_point(&self, p: &Vector3<f64>) -> Option<SurfacePoint> {
        let mut best: Option<SurfacePoint> = None;
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.corners(i);
            let q = closest_point_on_triangle(p, &a, &b, &c);
            let d = (q - p).norm();
            if best.is_none_or(|s| d < s.distance) {
                best = Some(SurfacePoint {
                    point: q,
                    distance: d,
                    triangle: i,
                });
            }
        }
        best
    }
}

/// Ray parameter of the intersection with triangle `abc`, two-sided.
pub fn moller_trumbore(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 * e1.norm() * e2.norm() * dir.norm() {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Loads `.ply` (ASCII) or `.obj` by extension.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ply") => parse_ply(&text, path),
        Some("obj") => parse_obj(&text, path),
        _ => Err(Error::InvalidInput(format!(
            "{}: mesh must be .ply or .obj",
            path.display()
        ))),
    }
}

pub fn write_ply(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", mesh.vertices.len()).unwrap();
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    writeln!(out, "element face {}", mesh.triangles.len()).unwrap();
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in &mesh.vertices {
        writeln!(out, "{} {} {}", v.x, v.y, v.z).unwrap();
    }
    for t in &mesh.triangles {
        writeln!(out, "3 {} {} {}", t[0], t[1], t[2]).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z).unwrap();
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct PlyElement {
    name: String,
    count: usize,
    /// Scalar property names; list properties are recorded as `None`.
    properties: Vec<Option<String>>,
}

fn parse_ply(text: &str, path: &Path) -> Result<TriangleMesh> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some("ply") {
        return Err(Error::parse(path, 1, "missing `ply` magic"));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(Error::parse(path, i + 1, format!("unsupported PLY format `{other}`")));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::parse(path, i + 1, format!("invalid element count `{count}`")))?,
                properties: Vec::new(),
            }),
            ["property", "list", _, _, _] => elements
                .last_mut()
                .ok_or_else(|| Error::parse(path, i + 1, "property before element"))?
                .properties
                .push(None),
            ["property", _, name] => elements
                .last_mut()
                .ok_or_else(|| Error::parse(path, i + 1, "property before element"))?
                .properties
                .push(Some(name.to_string())),
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(Error::parse(path, i + 1, format!("unrecognized header line `{line}`"))),
        }
    }
    if !header_done {
        return Err(Error::parse(path, 1, "missing end_header"));
    }

    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for el in &elements {
        let axis = |n: &str| el.properties.iter().position(|p| p.as_deref() == Some(n));
        for _ in 0..el.count {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, text.lines().count(), format!("truncated `{}` data", el.name)))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let num = |k: usize| -> Result<f64> {
                toks.get(k)
                    .ok_or_else(|| Error::parse(path, i + 1, "too few values"))?
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, i + 1, format!("invalid number `{}`", toks[k])))
            };
            match el.name.as_str() {
                "vertex" => {
                    let (Some(x), Some(y), Some(z)) = (axis("x"), axis("y"), axis("z")) else {
                        return Err(Error::parse(path, i + 1, "vertex element lacks x/y/z"));
                    };
                    vertices.push(Vector3::new(num(x)?, num(y)?, num(z)?));
                }
                "face" => {
                    let n = num(0)? as usize;
                    if n != 3 {
                        return Err(Error::parse(path, i + 1, format!("face with {n} vertices; only triangles are supported")));
                    }
                    let idx = |k: usize| -> Result<u32> {
                        toks.get(k)
                            .and_then(|t| t.parse::<u32>().ok())
                            .ok_or_else(|| Error::parse(path, i + 1, "invalid vertex index"))
                    };
                    triangles.push([idx(1)?, idx(2)?, idx(3)?]);
                }
                _ => {}
            }
        }
    }
    TriangleMesh::new(vertices, triangles)
}

fn parse_obj(text: &str, path: &Path) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces: Vec<(usize, [i64; 3])> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let xyz: Vec<f64> = toks
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::parse(path, i + 1, "invalid vertex coordinate"))?;
                if xyz.len() != 3 {
                    return Err(Error::parse(path, i + 1, "vertex needs three coordinates"));
                }
                vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx: Vec<i64> = toks
                    .map(|t| t.split('/').next().unwrap_or("").parse::<i64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::parse(path, i + 1, "invalid face index"))?;
                if idx.len() != 3 {
                    return Err(Error::parse(
                        path,
                        i + 1,
                        format!("face with {} vertices; only triangles are supported", idx.len()),
                    ));
                }
                faces.push((i + 1, [idx[0], idx[1], idx[2]]));
            }
            _ => {}
        }
    }
    let n = vertices.len() as i64;
    let mut triangles = Vec::with_capacity(faces.len());
    for (line, f) in faces {
        let mut t = [0u32; 3];
        for (k, raw) in f.iter().enumerate() {
            let resolved = match *raw {
                r if r > 0 => r - 1,
                r if r < 0 => n + r,
                _ => -1,
            };
            if !(0..n).contains(&resolved) {
                return Err(Error::parse(path, line, format!("face index {raw} out of range")));
            }
            t[k] = resolved as u32;
        }
        triangles.push(t);
    }
    TriangleMesh::new(vertices, triangles)
}

/// Axis-aligned box as 12 triangles. `inward` flips the winding so normals
/// point into the box.
pub fn box_mesh(min: &Vector3<f64>, max: &Vector3<f64>, inward: bool) -> TriangleMesh {
    let mut vertices = Vec::with_capacity(8);
    for k in 0..8 {
        vertices.push(Vector3::new(
            if k & 1 == 0 { min.x } else { max.x },
            if k & 2 == 0 { min.y } else { max.y },
            if k & 4 == 0 { min.z } else { max.z },
        ));
    }
    // outward-wound quads
    let quads: [[u32; 4]; 6] = [
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
    ];
    let mut triangles = Vec::with_capacity(12);
    for [a, b, c, d] in quads {
        if inward {
            triangles.push([a, c, b]);
            triangles.push([a, d, c]);
        } else {
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    TriangleMesh::new(vertices, triangles).expect("box corners are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_square() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn degenerate_triangles_are_dropped() {
        let m = TriangleMesh::new(
            vec![Vector3::zeros(), Vector3::x(), Vector3::new(2.0, 0.0, 0.0), Vector3::y()],
            vec![[0, 1, 2], [0, 1, 3], [1, 1, 3]],
        )
        .unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 3]]);
        assert_eq!(m.dropped_triangles(), 2);
    }

    #[test]
    fn out_of_range_index() {
        assert!(matches!(
            TriangleMesh::new(vec![Vector3::zeros()], vec![[0, 0, 1]]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn ray_hits_square() {
        let m = unit_square();
        let hit = m
            .raycast(&Vector3::new(0.3, 0.6, 2.0), &Vector3::new(0.0, 0.0, -1.0), 0.0)
            .unwrap();
        assert!((hit.distance - 2.0).abs() < 1e-12);
        assert!(m.raycast(&Vector3::new(1.3, 0.6, 2.0), &-Vector3::z(), 0.0).is_none());
        assert!(m.raycast(&Vector3::new(0.3, 0.6, 2.0), &Vector3::z(), 0.0).is_none());
    }

    #[test]
    fn box_normals() {
        let out = box_mesh(&Vector3::zeros(), &Vector3::new(1.0, 2.0, 3.0), false);
        let inw = box_mesh(&Vector3::zeros(), &Vector3::new(1.0, 2.0, 3.0), true);
        let center = Vector3::new(0.5, 1.0, 1.5);
        for t in 0..12 {
            let [a, _, _] = out.corners(t);
            assert!(out.face_normal(t).dot(&(a - center)) > 0.0);
            let [a, _, _] = inw.corners(t);
            assert!(inw.face_normal(t).dot(&(a - center)) < 0.0);
        }
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vector3::zeros(), Vector3::x(), Vector3::y());
        let cases = [
            (Vector3::new(0.2, 0.2, 1.0), Vector3::new(0.2, 0.2, 0.0)),
            (Vector3::new(-1.0, -1.0, 0.0), a),
            (Vector3::new(2.0, -0.5, 0.0), b),
            (Vector3::new(0.5, -1.0, 0.3), Vector3::new(0.5, 0.0, 0.0)),
            (Vector3::new(1.0, 1.0, 0.0), Vector3::new(0.5, 0.5, 0.0)),
            (Vector3::new(-0.5, 0.5, 0.0), Vector3::new(0.0, 0.5, 0.0)),
        ];
        for (p, want) in cases {
            assert!((closest_point_on_triangle(&p, &a, &b, &c) - want).norm() < 1e-12, "{p:?}");
        }
    }

    proptest! {
        #[test]
        fn closest_point_beats_samples(
            p in prop::array::uniform3(-2.0f64..2.0),
            tri in prop::array::uniform9(-1.0f64..1.0),
        ) {
            let p = Vector3::from(p);
            let a = Vector3::new(tri[0], tri[1], tri[2]);
            let b = Vector3::new(tri[3], tri[4], tri[5]);
            let c = Vector3::new(tri[6], tri[7], tri[8]);
            prop_assume!((b - a).cross(&(c - a)).norm() > 1e-3);
            let q = closest_point_on_triangle(&p, &a, &b, &c);
            let d = (q - p).norm();
            // dense barycentric sampling as oracle
            let n = 40;
            for i in 0..=n {
                for j in 0..=(n - i) {
                    let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
                    let s = a + (b - a) * u + (c - a) * v;
                    prop_assert!(d <= (s - p).norm() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn ply_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = box_mesh(&Vector3::new(-1.0, 0.5, 0.0), &Vector3::new(2.0, 1.5, 0.25), true);
        let path = dir.path().join("box.ply");
        write_ply(&m, &path).unwrap();
        assert_eq!(load_mesh(&path).unwrap(), m);
        let obj = dir.path().join("box.obj");
        write_obj(&m, &obj).unwrap();
        assert_eq!(load_mesh(&obj).unwrap(), m);
    }

    #[test]
    fn ply_with_extra_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 3\nproperty float nx\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n9 0 0 0\n9 1 0 0\n9 0 1 0\n3 0 1 2\n",
        )
        .unwrap();
        let m = load_mesh(&path).unwrap();
        assert_eq!(m.vertices()[1], Vector3::x());
        assert_eq!(m.triangles(), &[[0, 1, 2]]);
    }

    #[test]
    fn quads_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.obj");
        fs::write(&path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        assert!(matches!(load_mesh(&path), Err(Error::Parse { line: 5, .. })));
    }

    #[test]
    fn obj_negative_and_slashed_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.obj");
        fs::write(&path, "# tri\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 1 0\nf -3/1/1 2//1 -1\n").unwrap();
        assert_eq!(load_mesh(&path).unwrap().triangles(), &[[0, 1, 2]]);
    }

    #[test]
    fn binary_ply_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ply");
        fs::write(&path, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(matches!(load_mesh(&path), Err(Error::Parse { line: 2, .. })));
    }
}
