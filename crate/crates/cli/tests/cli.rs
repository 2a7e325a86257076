use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sceneloc::evaluation::read_report;
use sceneloc::partition::read_partition;
use sceneloc::visibility::read_visibility;

fn sceneloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sceneloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = sceneloc(dir, args);
    assert!(
        out.status.success(),
        "sceneloc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Synthetic scene with dense coverage, written under `dir/scene`.
fn scene(dir: &Path, cameras: &str) -> PathBuf {
    fs::write(dir.join("dense.toml"), "[synth]\nmin_visible_landmarks = 40\n").unwrap();
    ok(
        dir,
        &["--config", "dense.toml", "synth", "--out", "scene", "--seed", "5", "--sites", "1000", "--cameras", cameras],
    );
    dir.join("scene")
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sceneloc(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(sceneloc(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(sceneloc(dir.path(), &["bogus"]).status.code(), Some(1));
}

#[test]
fn select_counts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "200");
    ok(d, &["select", "--scene", "scene", "--count", "100", "--out", "a.txt"]);
    ok(d, &["select", "--scene", "scene", "--count", "100", "--out", "b.txt"]);
    let a = fs::read(d.join("a.txt")).unwrap();
    assert_eq!(a, fs::read(d.join("b.txt")).unwrap());
    let rows = String::from_utf8(a).unwrap();
    assert_eq!(rows.lines().filter(|l| !l.starts_with('#')).count(), 100);

    let out = sceneloc(d, &["select", "--scene", "scene", "--count", "100000", "--out", "c.txt"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("achievable"), "{msg}");
}

#[test]
fn partition_sizes_seeds_and_bad_groups() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "40");
    ok(d, &["partition", "--landmarks", "scene/landmarks.txt", "--out", "p.txt"]);
    let p = read_partition(d.join("p.txt")).unwrap();
    assert_eq!(p.group_sizes(), vec![125; 8]);

    for out in ["r1.txt", "r2.txt"] {
        ok(
            d,
            &["partition", "--landmarks", "scene/landmarks.txt", "--criterion", "random", "--seed", "7", "--out", out],
        );
    }
    assert_eq!(fs::read(d.join("r1.txt")).unwrap(), fs::read(d.join("r2.txt")).unwrap());

    let zero = sceneloc(d, &["partition", "--landmarks", "scene/landmarks.txt", "--groups", "0", "--out", "z.txt"]);
    assert_eq!(zero.status.code(), Some(1));
    let unseeded = sceneloc(
        d,
        &["partition", "--landmarks", "scene/landmarks.txt", "--criterion", "kmeans", "--out", "k.txt"],
    );
    assert_eq!(unseeded.status.code(), Some(1));
}

#[test]
fn visibility_matches_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "100");
    let args = [
        "visibility",
        "--scene",
        "scene",
        "--mesh",
        "scene/mesh.ply",
        "--landmarks",
        "scene/landmarks.txt",
        "--out",
        "v.txt",
        "--depth-abs",
        "0.04",
    ];
    ok(d, &args);
    let text = fs::read_to_string(d.join("v.txt")).unwrap();
    assert!(text.lines().any(|l| l == "tolerances 0.04 0.01 30"));

    let ours = read_visibility(d.join("v.txt")).unwrap();
    let gt = read_visibility(d.join("scene/visibility.txt")).unwrap();
    let disagreements = ours.disagreements(&gt).unwrap().len();
    let agreement = 1.0 - disagreements as f64 / gt.pair_count() as f64;
    assert!(agreement >= 0.999, "agreement {agreement}");

    let mut missing = args;
    missing[4] = "scene/absent.ply";
    assert_ne!(sceneloc(d, &missing).status.code(), Some(0));
}

#[test]
fn missing_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sceneloc(dir.path(), &["synth", "--out", "s"]).status.code(), Some(1));
    let out = sceneloc(
        dir.path(),
        &["localize", "--scene", "s", "--landmarks", "l", "--detections", "d", "--out", "p"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[synth]\nsites = 3\n").unwrap();
    let out = sceneloc(dir.path(), &["--config", "bad.toml", "synth", "--out", "s", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

fn simulate(d: &Path, noise: &str, outliers: &str, out: &str) {
    ok(
        d,
        &[
            "simulate",
            "--scene",
            "scene",
            "--landmarks",
            "scene/landmarks.txt",
            "--visibility",
            "scene/visibility.txt",
            "--seed",
            "1",
            "--noise",
            noise,
            "--outlier-rate",
            outliers,
            "--out",
            out,
        ],
    );
}

fn localize(d: &Path, detections: &[&str], weight_exp: &str, out: &str) {
    let mut args = vec!["localize", "--scene", "scene", "--landmarks", "scene/landmarks.txt"];
    for det in detections {
        args.extend(["--detections", det]);
    }
    args.extend(["--seed", "1", "--weight-exp", weight_exp, "--out", out]);
    ok(d, &args);
}

#[test]
fn noiseless_pipeline_recovers_every_pose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "60");
    simulate(d, "0", "0", "d.csv");
    localize(d, &["d.csv"], "2", "p.txt");
    ok(d, &["evaluate", "--scene", "scene", "--poses", "p.txt", "--out", "r.txt"]);
    let report = read_report(d.join("r.txt")).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].recall, 1.0);
}

#[test]
fn outlier_pipeline_with_partitioned_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "60");
    ok(d, &["partition", "--landmarks", "scene/landmarks.txt", "--groups", "4", "--out", "p.txt"]);
    ok(
        d,
        &[
            "simulate",
            "--scene",
            "scene",
            "--landmarks",
            "scene/landmarks.txt",
            "--visibility",
            "scene/visibility.txt",
            "--seed",
            "2",
            "--outlier-rate",
            "0.3",
            "--partitions",
            "p.txt",
            "--out",
            "d.csv",
        ],
    );
    let parts: Vec<String> = (0..4).map(|g| format!("d_part{g}.csv")).collect();
    let parts: Vec<&str> = parts.iter().map(String::as_str).collect();
    localize(d, &parts, "0", "e0.txt");
    localize(d, &parts, "2", "e2.txt");

    let mut args = vec!["evaluate", "--scene", "scene", "--poses", "e0.txt", "--poses", "e2.txt"];
    args.extend(["--landmarks", "scene/landmarks.txt"]);
    for p in &parts {
        args.extend(["--detections", p]);
    }
    args.extend(["--out", "r.txt", "--per-image", "images.csv"]);
    ok(d, &args);

    let report = read_report(d.join("r.txt")).unwrap();
    assert_eq!(report.rows.len(), 2);
    let (unweighted, weighted) = (&report.rows[0], &report.rows[1]);
    assert_eq!(unweighted.config.weight_exponent, 0.0);
    assert_eq!(weighted.config.partitions, 4);
    assert_eq!(weighted.config.landmarks_per_partition, 250);
    assert!(weighted.recall >= 0.95, "recall {}", weighted.recall);
    assert!(weighted.recall >= unweighted.recall);
    assert!(weighted.median_detection_deg.is_finite());

    let csv = fs::read_to_string(d.join("images.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 60);
}
