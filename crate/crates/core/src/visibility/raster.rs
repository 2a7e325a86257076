//! Z-buffer rasterization of a triangle mesh into a per-pixel depth and
//! normal map.

use nalgebra::{Vector2, Vector3};

use super::mesh::TriangleMesh;
use crate::scene::{Intrinsics, Pose};

/// Triangles are clipped against this camera-frame depth.
const NEAR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    intrinsics: Intrinsics,
    depth: Vec<f64>,
    normal: Vec<Vector3<f64>>,
}

impl DepthMap {
    fn empty(intrinsics: Intrinsics) -> Self {
        let n = intrinsics.width as usize * intrinsics.height as usize;
        DepthMap {
            intrinsics,
            depth: vec![f64::INFINITY; n],
            normal: vec![Vector3::zeros(); n],
        }
    }

    /// Intrinsics of the map's own pixel grid.
    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.intrinsics.width as usize + x as usize
    }

    /// Camera-frame depth, `+inf` where nothing was drawn.
    pub fn depth(&self, x: u32, y: u32) -> f64 {
        self.depth[self.index(x, y)]
    }

    /// Unit camera-frame normal facing the camera; zero where nothing was drawn.
    pub fn normal(&self, x: u32, y: u32) -> Vector3<f64> {
        self.normal[self.index(x, y)]
    }

    /// Nearest pixel to a position in this map's pixel coordinates.
    pub fn nearest_pixel(&self, uv: &Vector2<f64>) -> (u32, u32) {
        let clamp = |v: f64, n: u32| (v.round().max(0.0) as u32).min(n.saturating_sub(1));
        (clamp(uv.x, self.width()), clamp(uv.y, self.height()))
    }

    /// Nearest-pixel lookup of `(depth, normal)`.
    pub fn sample(&self, uv: &Vector2<f64>) -> (f64, Vector3<f64>) {
        let (x, y) = self.nearest_pixel(uv);
        let i = self.index(x, y);
        (self.depth[i], self.normal[i])
    }

    pub fn covered_pixels(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }
}

/// Full-resolution rasterization.
pub fn rasterize_depth(mesh: &TriangleMesh, k: &Intrinsics, pose: &Pose) -> DepthMap {
    rasterize_with(mesh, *k, pose)
}

/// Rasterization on a grid decimated by `factor` in each direction.
pub fn rasterize_depth_decimated(mesh: &TriangleMesh, k: &Intrinsics, pose: &Pose, factor: u32) -> DepthMap {
    rasterize_with(mesh, k.decimated(factor), pose)
}

fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let a_in = a.z >= NEAR;
        let b_in = b.z >= NEAR;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let s = (NEAR - a.z) / (b.z - a.z);
            let mut p = a + (b - a) * s;
            p.z = NEAR;
            out.push(p);
        }
    }
    out
}

fn rasterize_with(mesh: &TriangleMesh, k: Intrinsics, pose: &Pose) -> DepthMap {
    let mut map = DepthMap::empty(k);
    let k = &map.intrinsics.clone();
    let (w, h) = (k.width as i64, k.height as i64);
    let r = pose.rotation();

    for tri in 0..mesh.triangles().len() {
        let cam = mesh.corners(tri).map(|v| pose.transform(&v));
        if cam.iter().all(|p| p.z < NEAR) {
            continue;
        }
        let mut normal = r * mesh.face_normal(tri);
        if normal.dot(&cam[0]) > 0.0 {
            normal = -normal;
        }
        let poly = if cam.iter().all(|p| p.z >= NEAR) { cam.to_vec() } else { clip_near(&cam) };
        // screen position and inverse depth per polygon vertex
        let screen: Vec<(Vector2<f64>, f64)> = poly
            .iter()
            .map(|p| {
                (
                    Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy),
                    1.0 / p.z,
                )
            })
            .collect();

        for f in 1..screen.len().saturating_sub(1) {
            let (a, wa) = screen[0];
            let (b, wb) = screen[f];
            let (c, wc) = screen[f + 1];
            let area = edge(&a, &b, &c);
            if area.abs() < 1e-12 {
                continue;
            }
            let x0 = a.x.min(b.x).min(c.x).ceil().max(0.0) as i64;
            let x1 = (a.x.max(b.x).max(c.x).floor() as i64).min(w - 1);
            let y0 = a.y.min(b.y).min(c.y).ceil().max(0.0) as i64;
            let y1 = (a.y.max(b.y).max(c.y).floor() as i64).min(h - 1);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let eps = -1e-9;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = Vector2::new(x as f64, y as f64);
                    let la = edge(&b, &c, &p) / area;
                    let lb = edge(&c, &a, &p) / area;
                    let lc = 1.0 - la - lb;
                    if la < eps || lb < eps || lc < eps {
                        continue;
                    }
                    let inv_z = la * wa + lb * wb + lc * wc;
                    if inv_z <= 0.0 {
                        continue;
                    }
                    let z = 1.0 / inv_z;
                    let i = y as usize * w as usize + x as usize;
                    if z < map.depth[i] {
                        map.depth[i] = z;
                        map.normal[i] = normal;
                    }
                }
            }
        }
    }
    map
}

fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}
