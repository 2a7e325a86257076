//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{Matrix2x6, Matrix3, Rotation3, Unit, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use sceneloc::detection::{
    extract_detection, merge_detection_maps, read_detections, render_gt_heatmap, simulate_detections,
    simulate_detections_labeled, write_detections, DetectionSet, Heatmap, SimulatedImage, SimulationParams,
    DOWNSAMPLE, PRUNE_THRESHOLD,
};
use sceneloc::evaluation::{pose_errors, position_error, recall_at, rotation_error, PoseErrors};
use sceneloc::landmarks::{Landmark, LandmarkSet};
use sceneloc::partition::{partition, partition_default, partition_fps_traced, Criterion, PartitionAssignment};
use sceneloc::pose::{apply_increment, localize, reprojection_jacobian, PoseEstimate, SolverConfig};
use sceneloc::scene::{bearing, project, Intrinsics, Pose, SceneModel};
use sceneloc::synth::{generate_scene, SynthConfig, SynthScene};
use sceneloc::visibility::{
    compute_visibility, estimate_affine_alignment, AffineTransform, VisibilityParams, VisibilityTolerances,
};

fn report(n: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {n:02} [{name}]: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn scene(sites: usize, occluders: usize, cameras: usize, seed: u64) -> SynthScene {
    generate_scene(&SynthConfig {
        room: Vector3::new(6.0, 4.0, 3.0),
        landmark_sites: sites,
        occluders,
        cameras,
        seed,
        ..SynthConfig::default()
    })
    .expect("synthetic scene")
}

/// Localizes every image in parallel; results keyed by image id.
fn localize_all(
    dets: &BTreeMap<u32, DetectionSet>,
    ls: &LandmarkSet,
    model: &SceneModel,
    cfg: &SolverConfig,
) -> BTreeMap<u32, PoseEstimate> {
    let ids: Vec<u32> = model.images().keys().copied().collect();
    ids.par_iter()
        .map(|id| {
            let k = model.intrinsics_of(*id).unwrap();
            let empty = DetectionSet::empty(*id);
            let d = dets.get(id).unwrap_or(&empty);
            (*id, localize(d, ls, k, cfg, *id as u64).unwrap())
        })
        .collect()
}

fn errors_of(est: &BTreeMap<u32, PoseEstimate>, model: &SceneModel) -> Vec<Option<PoseErrors>> {
    est.iter()
        .map(|(id, e)| {
            e.pose
                .as_ref()
                .filter(|_| e.is_ok())
                .map(|p| pose_errors(&model.image(*id).unwrap().pose, p).unwrap())
        })
        .collect()
}

fn median_position(errs: &[Option<PoseErrors>]) -> f64 {
    // failures rank as infinitely wrong
    let v: Vec<f64> = errs.iter().map(|e| e.map_or(f64::INFINITY, |e| e.position_m)).collect();
    let mut s = v.clone();
    s.sort_by(f64::total_cmp);
    if s.len() % 2 == 1 {
        s[s.len() / 2]
    } else {
        0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2])
    }
}

#[test]
fn criterion_01_exact_recovery() {
    let s = scene(400, 6, 100, 1);
    let dets = simulate_detections(&s.model, &s.gt_landmarks, &s.gt_visibility, &SimulationParams::new(0.0, 0.0, 1))
        .unwrap();
    let min_dets = dets.values().map(DetectionSet::len).min().unwrap();
    let t0 = Instant::now();
    let est = localize_all(&dets, &s.gt_landmarks, &s.model, &SolverConfig::default());
    let elapsed = t0.elapsed().as_secs_f64();
    let errs = errors_of(&est, &s.model);
    let recall = recall_at(&errs, 5.0, 0.05).unwrap();
    let max_r = errs.iter().flatten().map(|e| e.rotation_deg).fold(0.0, f64::max);
    let max_t = errs.iter().flatten().map(|e| e.position_m).fold(0.0, f64::max);
    let pass = min_dets >= 12 && recall == 1.0 && max_r < 1e-6 && max_t < 1e-8 && elapsed < 5.0;
    report(
        1,
        "exact recovery",
        pass,
        format!(
            "{} images, min {min_dets} detections, recall {recall}, max dR {max_r:.2e} deg, max dt {max_t:.2e} m, {elapsed:.2} s",
            est.len()
        ),
    );
    assert!(pass);
}

struct OutlierRun {
    scene: SynthScene,
    simulated: BTreeMap<u32, SimulatedImage>,
    estimates: BTreeMap<u32, PoseEstimate>,
    seconds: f64,
}

fn outlier_run() -> OutlierRun {
    let t0 = Instant::now();
    let scene = scene(1000, 6, 500, 2);
    let simulated = simulate_detections_labeled(
        &scene.model,
        &scene.gt_landmarks,
        &scene.gt_visibility,
        &SimulationParams::new(1.0, 0.3, 2),
    )
    .unwrap();
    let dets: BTreeMap<u32, DetectionSet> = simulated.iter().map(|(id, s)| (*id, s.detections.clone())).collect();
    let cfg = SolverConfig {
        threshold_px: 4.0,
        ..SolverConfig::default()
    };
    let estimates = localize_all(&dets, &scene.gt_landmarks, &scene.model, &cfg);
    OutlierRun {
        scene,
        simulated,
        estimates,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

#[test]
fn criterion_02_outlier_robustness() {
    let run = outlier_run();
    let errs = errors_of(&run.estimates, &run.scene.model);
    let recall = recall_at(&errs, 5.0, 0.05).unwrap();
    let clean = run
        .estimates
        .iter()
        .filter(|(id, e)| e.inliers.is_disjoint(&run.simulated[*id].outliers))
        .count();
    let clean_frac = clean as f64 / run.estimates.len() as f64;
    let pass = run.estimates.len() == 500 && recall >= 0.95 && clean_frac >= 0.99 && run.seconds < 60.0;
    report(
        2,
        "outlier robustness",
        pass,
        format!(
            "recall {recall:.4}, outlier-free inlier sets {:.2}%, {:.1} s",
            100.0 * clean_frac,
            run.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_weighted_pose_trend() {
    let mut non_negative = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let s = scene(1000, 6, 500, 100 + seed);
        let dets = simulate_detections(
            &s.model,
            &s.gt_landmarks,
            &s.gt_visibility,
            &SimulationParams::new(3.0, 0.3, seed),
        )
        .unwrap();
        let mut stats = Vec::new();
        for e in [0.0, 2.0] {
            let cfg = SolverConfig {
                exponent: e,
                ..SolverConfig::default()
            };
            let errs = errors_of(&localize_all(&dets, &s.gt_landmarks, &s.model, &cfg), &s.model);
            stats.push((recall_at(&errs, 5.0, 0.05).unwrap(), median_position(&errs)));
        }
        let (r0, t0) = stats[0];
        let (r2, t2) = stats[1];
        if r2 >= r0 && t2 <= t0 {
            non_negative += 1;
        }
        lines.push(format!("seed {seed}: recall {r0:.3}->{r2:.3}, median dt {:.2}->{:.2} mm", 1e3 * t0, 1e3 * t2));
    }
    let pass = non_negative >= 4;
    report(
        3,
        "weighted-pose trend",
        pass,
        format!("{non_negative}/5 seeds non-negative; {}", lines.join("; ")),
    );
    assert!(pass);
}

/// True when first-hit depths through pixels within one pixel of `uv`
/// span more than `tol`: the nearest-pixel lookup sits on a depth edge.
fn near_depth_edge(s: &SynthScene, k: &Intrinsics, pose: &Pose, uv: &Vector2<f64>, tol: f64) -> bool {
    let c = pose.center();
    let rt = pose.rotation().transpose();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for dy in [-1.0, 0.0, 1.0] {
        for dx in [-1.0, 0.0, 1.0] {
            let dir = (rt * bearing(k, &(uv + Vector2::new(dx, dy)))).normalize();
            let z = match s.mesh.raycast(&c, &dir, 0.0) {
                Some(hit) => pose.transform(&(c + dir * hit.distance)).z,
                None => f64::INFINITY,
            };
            lo = lo.min(z);
            hi = hi.max(z);
        }
    }
    hi - lo > tol
}

#[test]
fn criterion_04_visibility_oracle_equivalence() {
    let s = scene(200, 10, 100, 4);
    let t0 = Instant::now();
    let (table, diag) = compute_visibility(&s.model, &s.mesh, &s.gt_landmarks, &VisibilityParams::default()).unwrap();
    let seconds = t0.elapsed().as_secs_f64();
    let disagreements = table.disagreements(&s.gt_visibility).unwrap();
    let pairs = table.pair_count();
    let agreement = 1.0 - disagreements.len() as f64 / pairs as f64;
    let tol = VisibilityTolerances::default();
    let mut unexplained = 0;
    let mut grazing = 0;
    for (l, i) in &disagreements {
        let im = s.model.image(*i).unwrap();
        let k = s.model.intrinsics_of(*i).unwrap();
        let xyz = s.gt_landmarks.get(*l).unwrap().xyz;
        let z = im.pose.transform(&xyz).z;
        let incidence = s.site_normals[*l as usize].dot(&(im.pose.center() - xyz).normalize()).acos().to_degrees();
        grazing += usize::from(incidence > 85.0);
        let explained = project(k, &im.pose, &xyz)
            .is_some_and(|uv| near_depth_edge(&s, k, &im.pose, &uv, tol.depth_tolerance(z)));
        unexplained += usize::from(!explained);
    }
    let pass = pairs == 200 * 100
        && diag.excluded.is_empty()
        && agreement >= 0.999
        && unexplained == 0
        && seconds < 120.0;
    report(
        4,
        "visibility oracle equivalence",
        pass,
        format!(
            "{pairs} pairs, {} disagreements ({:.3}% agreement), {unexplained} off depth edges, \
             {grazing} on faces seen beyond 85 deg, {seconds:.2} s",
            disagreements.len(),
            100.0 * agreement,
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_subpixel_extraction() {
    let (w, h) = (640u32, 480u32);
    let grid = (w.div_ceil(DOWNSAMPLE) as f64, h.div_ceil(DOWNSAMPLE) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_err: f64 = 0.0;
    for sigma in [1.0, 1.5, 2.5] {
        for i in 0..1000 {
            // full patch inside the grid
            let c = Vector2::new(rng.random_range(8.0..grid.0 - 9.0), rng.random_range(8.0..grid.1 - 9.0));
            let uv = c * DOWNSAMPLE as f64;
            let hm = render_gt_heatmap(i, Some(&uv), w, h, sigma);
            let det = extract_detection(&hm).expect("peak above threshold");
            max_err = max_err.max((det.uv - uv).norm() / DOWNSAMPLE as f64);
        }
    }
    let at = |v: f64| {
        let mut values = vec![0.0; 80 * 60];
        values[30 * 80 + 40] = v;
        extract_detection(&Heatmap::from_values(0, 80, 60, values).unwrap())
    };
    let boundary = at(PRUNE_THRESHOLD).is_none() && at(f64::from_bits(PRUNE_THRESHOLD.to_bits() + 1)).is_some();
    let pass = max_err <= 0.25 && boundary;
    report(
        5,
        "subpixel extraction",
        pass,
        format!("max error {max_err:.4} low-res px over 3000 maps, prune boundary exact: {boundary}"),
    );
    assert!(pass);
}

/// Replays the farthest-point insertion order against an independent
/// recomputation of each greedy choice.
fn fps_replay_holds(ls: &LandmarkSet, p: &PartitionAssignment, order: &[u32]) -> bool {
    let lms = ls.landmarks();
    let n = lms.len();
    let g = p.groups();
    if order.len() != n {
        return false;
    }
    let caps: Vec<usize> = (0..g).map(|i| n / g + usize::from(i < n % g)).collect();
    let top = lms
        .iter()
        .max_by(|a, b| a.saliency.total_cmp(&b.saliency).then(b.id.cmp(&a.id)))
        .unwrap()
        .id;
    if order[0] != top || p.group_of(top) != Some(0) {
        return false;
    }
    let dist = |a: u32, b: u32| (lms[a as usize].xyz - lms[b as usize].xyz).norm();
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); g];
    let mut done = BTreeSet::new();
    members[0].push(top);
    done.insert(top);
    for (step, &id) in order.iter().enumerate().skip(1) {
        let spread = |x: u32| done.iter().map(|&a| dist(a, x)).fold(f64::INFINITY, f64::min);
        let best = (0..n as u32).filter(|x| !done.contains(x)).map(spread).fold(f64::NEG_INFINITY, f64::max);
        if done.contains(&id) || spread(id) < best - 1e-12 {
            return false;
        }
        let group = p.group_of(id).unwrap();
        if step < g {
            if group != step {
                return false;
            }
        } else {
            let mean = |c: usize| members[c].iter().map(|&m| dist(m, id)).sum::<f64>() / members[c].len() as f64;
            let best = (0..g)
                .filter(|&c| members[c].len() < caps[c])
                .map(mean)
                .fold(f64::INFINITY, f64::min);
            if members[group].len() >= caps[group] || mean(group) > best + 1e-12 {
                return false;
            }
        }
        members[group].push(id);
        done.insert(id);
    }
    true
}

#[test]
fn criterion_06_partition_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lms: Vec<Landmark> = (0..1000)
        .map(|i| Landmark {
            id: i,
            source_point_id: i as u64,
            xyz: Vector3::new(rng.random_range(0.0..6.0), rng.random_range(0.0..4.0), rng.random_range(0.0..3.0)),
            saliency: rng.random_range(1.0..20.0),
        })
        .collect();
    let ls = LandmarkSet::new(lms, None).unwrap();
    let mut failures = Vec::new();
    for g in [3, 4, 6, 8, 12] {
        for c in Criterion::ALL {
            let p = partition(&ls, c, g, Some(7), 100).unwrap();
            let mut seen = BTreeSet::new();
            let mut covering = true;
            for group in 0..g {
                for id in p.members(group) {
                    covering &= seen.insert(id);
                }
            }
            covering &= seen.len() == 1000;
            let sizes = p.group_sizes();
            let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
            if !covering || spread > 1 {
                failures.push(format!("{c} g={g}"));
            }
        }
        let (p, order) = partition_fps_traced(&ls, g).unwrap();
        if !fps_replay_holds(&ls, &p, &order) {
            failures.push(format!("fps replay g={g}"));
        }
    }
    let pass = failures.is_empty();
    report(
        6,
        "partition invariants",
        pass,
        format!("20 criterion/group combinations plus 5 FPS replays; failures: {failures:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_metric_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let random_q = |rng: &mut ChaCha8Rng| -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ))
    };
    let mut ten_err: f64 = 0.0;
    for axis in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
        let r = Rotation3::from_axis_angle(&axis, 10f64.to_radians());
        ten_err = ten_err.max((rotation_error(&Matrix3::identity(), r.matrix()).unwrap() - 10.0).abs());
    }
    let mut geo_err: f64 = 0.0;
    for _ in 0..10_000 {
        let (a, b) = (random_q(&mut rng), random_q(&mut rng));
        let oracle = (2.0 * a.coords.dot(&b.coords).abs().min(1.0).acos()).to_degrees();
        let e = rotation_error(a.to_rotation_matrix().matrix(), b.to_rotation_matrix().matrix()).unwrap();
        geo_err = geo_err.max((e - oracle).abs());
    }
    let mut center_err: f64 = 0.0;
    for _ in 0..10_000 {
        let pa = Pose::from_rotation(&random_q(&mut rng).to_rotation_matrix(), Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)));
        let pb = Pose::from_rotation(&random_q(&mut rng).to_rotation_matrix(), Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)));
        let ca = -(pa.rotation().transpose() * pa.translation());
        let cb = -(pb.rotation().transpose() * pb.translation());
        center_err = center_err.max((position_error(&pa, &pb) - (ca - cb).norm()).abs());
    }
    let pass = ten_err <= 1e-9 && geo_err <= 1e-9 && center_err <= 1e-12;
    report(
        7,
        "metric formulas",
        pass,
        format!("10 deg error {ten_err:.1e}, geodesic max diff {geo_err:.1e}, center max diff {center_err:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_affine_alignment() {
    let mut worst: f64 = 0.0;
    let mut mask_exact = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + trial);
        let a = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
        let b = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let truth = AffineTransform::new(a, b).unwrap();
        let mut matches = Vec::new();
        let mut outlier = Vec::new();
        for i in 0..100 {
            let src = Vector3::from_fn(|_, _| rng.random_range(-2.5..2.5));
            let mut tgt = truth.apply(&src);
            let out = i % 5 == 0;
            if out {
                let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
                tgt += dir * rng.random_range(0.2..1.0);
            }
            matches.push((src, tgt));
            outlier.push(out);
        }
        let (est, mask) = estimate_affine_alignment(&matches, 0.05, 1000, trial).unwrap();
        worst = worst
            .max((est.matrix() - truth.matrix()).abs().max())
            .max((est.offset() - truth.offset()).abs().max());
        if mask.iter().zip(&outlier).all(|(m, o)| *m != *o) {
            mask_exact += 1;
        }
    }
    let pass = worst < 1e-6 && mask_exact == 100;
    report(
        8,
        "affine alignment",
        pass,
        format!("max parameter error {worst:.1e}, outliers exactly flagged in {mask_exact}/100 trials"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_refinement_correctness() {
    let k = Intrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let axis = Unit::new_normalize(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        let pose = Pose::from_rotation(
            &Rotation3::from_axis_angle(&axis, rng.random_range(0.0..3.1)),
            Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        );
        let uv = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let p = pose.inverse().transform(&(bearing(&k, &uv) * rng.random_range(1.0..8.0)));
        let proj = |q: &Pose| {
            let c = q.transform(&p);
            Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy)
        };
        let analytic = reprojection_jacobian(&k, &pose, &p);
        let mut numeric = Matrix2x6::zeros();
        let step = 1e-6;
        for j in 0..6 {
            let mut d = Vector6::zeros();
            d[j] = step;
            let col = (proj(&apply_increment(&pose, &d)) - proj(&apply_increment(&pose, &-d))) / (2.0 * step);
            numeric.set_column(j, &col);
        }
        worst = worst.max((analytic - numeric).norm() / analytic.norm());
    }
    let run = outlier_run();
    let mut refined = 0;
    let mut monotone = true;
    for e in run.estimates.values() {
        if let Some(r) = &e.refinement {
            refined += 1;
            monotone &= r.cost_history.windows(2).all(|w| w[1] <= w[0]);
        }
    }
    let pass = worst < 1e-5 && monotone && refined > 0;
    report(
        9,
        "refinement correctness",
        pass,
        format!("max relative Jacobian error {worst:.1e}; cost monotone over {refined} refinements: {monotone}"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_ensemble_composition() {
    let s = scene(1000, 6, 100, 10);
    let ls = &s.gt_landmarks;
    let parts = partition_default(ls, 8).unwrap();
    let dets = simulate_detections(&s.model, ls, &s.gt_visibility, &SimulationParams::new(1.0, 0.3, 10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let merged_path = dir.path().join("all.csv");
    write_detections(&dets, &merged_path).unwrap();
    let mut files = Vec::new();
    for g in 0..8 {
        let members: BTreeSet<u32> = parts.members(g).into_iter().collect();
        let part: BTreeMap<u32, DetectionSet> = dets
            .iter()
            .map(|(id, d)| (*id, d.filter(|l| members.contains(&l))))
            .collect();
        let path = dir.path().join(format!("part_{g}.csv"));
        write_detections(&part, &path).unwrap();
        files.push(path);
    }
    let sizes = parts.group_sizes();
    let per_part: Vec<_> = files.iter().map(|f| read_detections(f).unwrap()).collect();
    let from_parts = merge_detection_maps(&per_part).unwrap();
    let from_file = read_detections(&merged_path).unwrap();
    let cfg = SolverConfig::default();
    let a = localize_all(&from_parts, ls, &s.model, &cfg);
    let b = localize_all(&from_file, ls, &s.model, &cfg);
    let identical = from_parts == from_file && format!("{a:?}") == format!("{b:?}");
    let ok = a.values().filter(|e| e.is_ok()).count();
    let pass = sizes.iter().all(|n| *n == 125) && identical;
    report(
        10,
        "ensemble composition",
        pass,
        format!("8 files of {sizes:?} landmarks; {ok}/{} images localized; identical: {identical}", a.len()),
    );
    assert!(pass);
}
