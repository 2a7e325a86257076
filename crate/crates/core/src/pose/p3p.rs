//! Minimal three-point absolute pose (Grunert's formulation).
//!
//! With camera-frame depths `s1, s2, s3` along unit bearings `f1, f2, f3`,
//! the substitution `v = s3 / s1` reduces the law-of-cosines system to a
//! quartic in `v`. Each positive real root yields depths, which are polished
//! by Gauss-Newton on the three distance equations before the rigid
//! transform is recovered by aligning the triangles.

use nalgebra::{Complex, Matrix3, SMatrix, SVector, Vector2, Vector3};

use super::refine::apply_increment;
use crate::error::{Error, Result};
use crate::scene::{bearing, Intrinsics, Pose};

/// Maximum reprojection error (pixels) of a returned solution.
pub const P3P_REPROJECTION_TOL: f64 = 1e-6;

/// All poses that map `points` onto the pixel positions `uv`.
pub fn p3p_solve(points: &[Vector3<f64>; 3], uv: &[Vector2<f64>; 3], k: &Intrinsics) -> Result<Vec<Pose>> {
    let bearings = [bearing(k, &uv[0]), bearing(k, &uv[1]), bearing(k, &uv[2])];
    let poses = p3p_bearings(points, &bearings)?;
    Ok(poses
        .into_iter()
        .filter(|pose| {
            points.iter().zip(uv).all(|(p, q)| {
                let pc = pose.transform(p);
                pc.z > 0.0 && {
                    let proj = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
                    (proj - q).norm() < P3P_REPROJECTION_TOL
                }
            })
        })
        .collect())
}

/// Solutions for unit `bearings`, before any pixel-space filtering.
pub fn p3p_bearings(points: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Result<Vec<Pose>> {
    let [p1, p2, p3] = points;
    let scale = (p2 - p1).norm().max((p3 - p1).norm()).max((p3 - p2).norm());
    if scale == 0.0 || (p2 - p1).cross(&(p3 - p1)).norm() <= 1e-10 * scale * scale {
        return Err(Error::Degenerate("P3P points are collinear".into()));
    }
    let f = bearings.map(|b| b.normalize());
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if f[i].cross(&f[j]).norm() < 1e-12 {
            return Err(Error::Degenerate("P3P bearings coincide".into()));
        }
    }

    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    let ca = f[1].dot(&f[2]);
    let cb = f[0].dot(&f[2]);
    let cg = f[0].dot(&f[1]);

    let k = (a2 - c2) / b2;
    // highest degree first
    let coeffs = [
        (k - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca,
        4.0 * (k * (1.0 - k) * cb - (1.0 - (a2 + c2) / b2) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (k * k - 1.0 + 2.0 * k * k * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
            - 4.0 * (a2 + c2) / b2 * ca * cb * cg
            + 2.0 * (b2 - a2) / b2 * cg * cg),
        4.0 * (-k * (1.0 + k) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - (a2 + c2) / b2) * ca * cg),
        (1.0 + k).powi(2) - 4.0 * a2 / b2 * cg * cg,
    ];

    let mut poses: Vec<Pose> = Vec::new();
    for v in real_roots(&coeffs) {
        if v <= 0.0 {
            continue;
        }
        let denom = 1.0 + v * v - 2.0 * v * cb;
        if denom <= 0.0 {
            continue;
        }
        let s1 = (b2 / denom).sqrt();
        let s3 = v * s1;
        let Some(s2) = middle_depth(s1, s3, a2, c2, ca, cg) else {
            continue;
        };
        let s = polish_depths([s1, s2, s3], [a2, b2, c2], [ca, cb, cg]);
        if s.iter().any(|d| !(*d > 0.0)) {
            continue;
        }
        let cam = [f[0] * s[0], f[1] * s[1], f[2] * s[2]];
        let Some(pose) = align(points, &cam) else { continue };
        let pose = polish_pose(points, &f, pose);
        let duplicate = poses.iter().any(|q| {
            (q.rotation() - pose.rotation()).abs().max() < 1e-9
                && (q.translation() - pose.translation()).norm() < 1e-9 * (1.0 + pose.translation().norm())
        });
        if !duplicate {
            poses.push(pose);
        }
    }
    Ok(poses)
}

/// `s2` from `s1`, `s3` using the difference of the two equations that
/// contain it, or the root of the first that best satisfies the second.
fn middle_depth(s1: f64, s3: f64, a2: f64, c2: f64, ca: f64, cg: f64) -> Option<f64> {
    let den = 2.0 * (s1 * cg - s3 * ca);
    if den.abs() > 1e-10 * (s1 + s3) {
        let s2 = (s1 * s1 - s3 * s3 - c2 + a2) / den;
        return (s2 > 0.0).then_some(s2);
    }
    // s2² − 2 s1 cg s2 + s1² − c² = 0
    let disc = s1 * s1 * cg * cg - (s1 * s1 - c2);
    if disc < 0.0 {
        return None;
    }
    let r = disc.sqrt();
    let residual = |s2: f64| (s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - a2).abs();
    [s1 * cg + r, s1 * cg - r]
        .into_iter()
        .filter(|s2| *s2 > 0.0)
        .min_by(|x, y| residual(*x).total_cmp(&residual(*y)))
}

/// Gauss-Newton on the three law-of-cosines equations.
fn polish_depths(mut s: [f64; 3], [a2, b2, c2]: [f64; 3], [ca, cb, cg]: [f64; 3]) -> [f64; 3] {
    let eval = |s: &[f64; 3]| {
        Vector3::new(
            s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * cg - c2,
            s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * cb - b2,
            s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * ca - a2,
        )
    };
    let mut r = eval(&s);
    for _ in 0..8 {
        let j = Matrix3::new(
            2.0 * (s[0] - s[1] * cg),
            2.0 * (s[1] - s[0] * cg),
            0.0,
            2.0 * (s[0] - s[2] * cb),
            0.0,
            2.0 * (s[2] - s[0] * cb),
            0.0,
            2.0 * (s[1] - s[2] * ca),
            2.0 * (s[2] - s[1] * ca),
        );
        let Some(step) = j.lu().solve(&r) else { break };
        let next = [s[0] - step[0], s[1] - step[1], s[2] - step[2]];
        let rn = eval(&next);
        if rn.norm() >= r.norm() {
            break;
        }
        s = next;
        r = rn;
    }
    s
}

/// Rigid transform taking `world` onto `cam` (least squares, reflection-free).
fn align(world: &[Vector3<f64>; 3], cam: &[Vector3<f64>; 3]) -> Option<Pose> {
    let wc = (world[0] + world[1] + world[2]) / 3.0;
    let cc = (cam[0] + cam[1] + cam[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (world[i] - wc) * (cam[i] - cc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let d = (vt.transpose() * u.transpose()).determinant().signum();
    let r = vt.transpose() * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Pose::new(r, cc - r * wc).ok()
}

/// Gauss-Newton on the components of the camera-frame points orthogonal
/// to their bearings.
fn polish_pose(world: &[Vector3<f64>; 3], f: &[Vector3<f64>; 3], mut pose: Pose) -> Pose {
    let residual = |pose: &Pose| -> SVector<f64, 9> {
        let mut r = SVector::<f64, 9>::zeros();
        for i in 0..3 {
            let pc = pose.transform(&world[i]);
            r.fixed_rows_mut::<3>(3 * i).copy_from(&(pc - f[i] * f[i].dot(&pc)));
        }
        r
    };
    let mut r = residual(&pose);
    for _ in 0..5 {
        let mut j = SMatrix::<f64, 9, 6>::zeros();
        for i in 0..3 {
            let rp = pose.rotation() * world[i];
            let proj = Matrix3::identity() - f[i] * f[i].transpose();
            j.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&(proj * -rp.cross_matrix()));
            j.fixed_view_mut::<3, 3>(3 * i, 3).copy_from(&proj);
        }
        let Some(step) = (j.transpose() * j).lu().solve(&(j.transpose() * r)) else { break };
        let next = apply_increment(&pose, &-step);
        let rn = residual(&next);
        if rn.norm() >= r.norm() {
            break;
        }
        pose = next;
        r = rn;
    }
    pose
}

/// Real roots of `c[0] x⁴ + c[1] x³ + … + c[4]`, polished by Newton steps.
fn real_roots(c: &[f64; 5]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let lead = c.iter().position(|v| v.abs() > 1e-14 * scale).unwrap_or(4);
    let poly: Vec<f64> = c[lead..].iter().map(|v| v / c[lead]).collect();
    let degree = poly.len() - 1;
    if degree == 0 {
        return Vec::new();
    }
    let mut companion = nalgebra::DMatrix::<f64>::zeros(degree, degree);
    for j in 0..degree {
        companion[(0, j)] = -poly[j + 1];
    }
    for i in 1..degree {
        companion[(i, i - 1)] = 1.0;
    }
    let eig: Vec<Complex<f64>> = companion.complex_eigenvalues().iter().copied().collect();
    let eval = |x: f64| {
        let mut p = 0.0;
        let mut dp = 0.0;
        for a in &poly {
            dp = dp * x + p;
            p = p * x + a;
        }
        (p, dp)
    };
    let mut roots = Vec::new();
    for z in eig {
        if z.im.abs() > 1e-3 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..6 {
            let (p, dp) = eval(x);
            if dp == 0.0 {
                break;
            }
            let next = x - p / dp;
            if !next.is_finite() || eval(next).0.abs() >= p.abs() {
                break;
            }
            x = next;
        }
        roots.push(x);
    }
    roots
}

/// Reprojection error in pixels, `None` when the point is behind the camera.
pub fn reprojection_error(k: &Intrinsics, pose: &Pose, xyz: &Vector3<f64>, uv: &Vector2<f64>) -> Option<f64> {
    let pc = pose.transform(xyz);
    (pc.z > 0.0).then(|| (Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - uv).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::project;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Unit::new_normalize(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        let r = Rotation3::from_axis_angle(&axis, rng.random_range(0.0..3.1));
        let t = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        Pose::from_rotation(&r, t)
    }

    /// Three points in front of `pose`, projected inside the image.
    fn visible_points(rng: &mut ChaCha8Rng, pose: &Pose) -> [Vector3<f64>; 3] {
        let inv = pose.inverse();
        [0; 3].map(|_| {
            let uv = Vector2::new(rng.random_range(20.0..620.0), rng.random_range(20.0..460.0));
            let d = rng.random_range(2.0..8.0);
            inv.transform(&(bearing(&k(), &uv) * d))
        })
    }

    #[test]
    fn recovers_ground_truth_over_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut attempted = 0;
        for _ in 0..1000 {
            let truth = random_pose(&mut rng);
            let pts = visible_points(&mut rng, &truth);
            let uv = pts.map(|p| project(&k(), &truth, &p).unwrap());
            let area = (pts[1] - pts[0]).cross(&(pts[2] - pts[0])).norm();
            if area < 1e-2 {
                continue;
            }
            attempted += 1;
            let sols = p3p_solve(&pts, &uv, &k()).unwrap();
            assert!(!sols.is_empty() && sols.len() <= 4);
            let found = sols.iter().any(|s| {
                (s.rotation() - truth.rotation()).abs().max() < 1e-8
                    && (s.translation() - truth.translation()).abs().max() < 1e-8
            });
            assert!(found, "ground truth missing among {} solutions", sols.len());
        }
        assert!(attempted > 950);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts = [Vector3::new(0.0, 0.0, 5.0), Vector3::new(1.0, 0.0, 5.0), Vector3::new(2.0, 0.0, 5.0)];
        let uv = pts.map(|p| project(&k(), &Pose::identity(), &p).unwrap());
        assert!(matches!(p3p_solve(&pts, &uv, &k()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn coincident_bearings_are_degenerate() {
        let pts = [Vector3::new(0.0, 0.0, 5.0), Vector3::new(1.0, 0.0, 5.0), Vector3::new(0.0, 1.0, 5.0)];
        let uv = [Vector2::new(320.0, 240.0), Vector2::new(320.0, 240.0), Vector2::new(100.0, 80.0)];
        assert!(matches!(p3p_solve(&pts, &uv, &k()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn equilateral_configuration() {
        // equilateral triangle facing a camera on its axis: the symmetric
        // configuration has several valid solutions
        let r = 1.0;
        let pts = [0.0f64, 120.0, 240.0].map(|deg| {
            let a = deg.to_radians();
            Vector3::new(r * a.cos(), r * a.sin(), 0.0)
        });
        let truth = Pose::look_at(&Vector3::new(0.0, 0.0, 3.0), &Vector3::zeros(), &Vector3::y()).unwrap();
        let uv = pts.map(|p| project(&k(), &truth, &p).unwrap());
        let sols = p3p_solve(&pts, &uv, &k()).unwrap();
        assert!(!sols.is_empty());
        for s in &sols {
            for (p, q) in pts.iter().zip(&uv) {
                assert!(reprojection_error(&k(), s, p, q).unwrap() < P3P_REPROJECTION_TOL);
            }
        }
        assert!(sols
            .iter()
            .any(|s| (s.center() - truth.center()).norm() < 1e-9));
    }

    #[test]
    fn quartic_roots() {
        // (x-1)(x-2)(x+3)(x-0.5)
        let c = [1.0, -0.5, -7.0, 9.5, -3.0];
        let mut r = real_roots(&c);
        r.sort_by(f64::total_cmp);
        let want = [-3.0, 0.5, 1.0, 2.0];
        assert_eq!(r.len(), 4);
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        // degree drop: 0·x⁴ + (x−2)(x²+1)
        let r = real_roots(&[0.0, 1.0, -2.0, 1.0, -2.0]);
        assert_eq!(r.len(), 1);
        assert!((r[0] - 2.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn solutions_reproject_exactly(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_pose(&mut rng);
            let pts = visible_points(&mut rng, &truth);
            prop_assume!((pts[1] - pts[0]).cross(&(pts[2] - pts[0])).norm() > 1e-2);
            let uv = pts.map(|p| project(&k(), &truth, &p).unwrap());
            for s in p3p_solve(&pts, &uv, &k()).unwrap() {
                for (p, q) in pts.iter().zip(&uv) {
                    prop_assert!(reprojection_error(&k(), &s, p, q).unwrap() < P3P_REPROJECTION_TOL);
                }
            }
        }
    }
}
