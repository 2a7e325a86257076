//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use sceneloc::detection::{
    merge_detection_maps, read_detections, simulate_detections, write_detections, DetectionSet,
};
use sceneloc::evaluation::{
    build_report, detection_errors, write_per_image_csv, write_report, ImageEstimate, Run, RunConfig,
};
use sceneloc::landmarks::{read_landmarks, select_landmarks, write_landmarks};
use sceneloc::partition::{partition as split, read_partition, write_partition, Criterion};
use sceneloc::pose::{localize as estimate, read_poses, write_poses_annotated, PoseRecord};
use sceneloc::scene::{load_scene, Pose, SceneModel};
use sceneloc::synth::{generate_scene, observed_landmarks, write_synth};
use sceneloc::visibility::{compute_visibility, load_mesh, read_visibility, write_visibility};

use crate::config::RunConfig as Config;
use crate::{CliError, EvaluateArgs, LocalizeArgs, PartitionArgs, SelectArgs, SimulateArgs, SynthArgs, VisibilityArgs};

const RUN_TAG: &str = "run";

/// Accepts either the reconstruction directory itself or one holding it
/// as `sparse/`.
fn open_scene(dir: &Path) -> Result<SceneModel, CliError> {
    let nested = dir.join("sparse");
    let dir = if !dir.join("cameras.txt").exists() && nested.join("cameras.txt").exists() {
        nested
    } else {
        dir.to_path_buf()
    };
    Ok(load_scene(dir)?)
}

fn override_with<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Decorrelates per-image seeds (splitmix64 finalizer).
fn image_seed(seed: u64, image_id: u32) -> u64 {
    let mut z = seed ^ (image_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn synth(cfg: &Config, a: SynthArgs) -> Result<(), CliError> {
    let mut section = cfg.synth.clone();
    override_with(&mut section.landmark_sites, a.sites);
    override_with(&mut section.occluders, a.occluders);
    override_with(&mut section.cameras, a.cameras);
    let scene = generate_scene(&section.to_core(a.seed)?)?;
    write_synth(&scene, &a.out)?;
    eprintln!(
        "wrote {} images, {} landmark sites ({} observed), {} occluders to {}",
        scene.model.images().len(),
        scene.gt_landmarks.len(),
        observed_landmarks(&scene).len(),
        scene.occluders.len(),
        a.out.display()
    );
    Ok(())
}

pub fn select(cfg: &Config, a: SelectArgs) -> Result<(), CliError> {
    let mut section = cfg.select.clone();
    override_with(&mut section.count, a.count);
    override_with(&mut section.initial_radius, a.radius);
    override_with(&mut section.min_track, a.min_track);
    let model = open_scene(&a.scene)?;
    let set = select_landmarks(&model, &section.to_core())?;
    write_landmarks(&set, &a.out)?;
    eprintln!("selected {} landmarks", set.len());
    Ok(())
}

pub fn partition(cfg: &Config, a: PartitionArgs) -> Result<(), CliError> {
    let mut section = cfg.partition.clone();
    override_with(&mut section.criterion, a.criterion);
    override_with(&mut section.groups, a.groups);
    override_with(&mut section.kmeans_max_iter, a.max_iter);
    let criterion = section.criterion()?;
    if section.groups == 0 {
        return Err(CliError::usage("--groups must be at least 1"));
    }
    if matches!(criterion, Criterion::Random | Criterion::KMeans) && a.seed.is_none() {
        return Err(CliError::usage(format!("criterion `{criterion}` requires --seed")));
    }
    let ls = read_landmarks(&a.landmarks)?;
    let p = split(&ls, criterion, section.groups, a.seed, section.kmeans_max_iter)?;
    write_partition(&p, &a.out)?;
    let sizes = p.group_sizes();
    eprintln!(
        "{} landmarks into {} groups of {}..{}",
        ls.len(),
        p.groups(),
        sizes.iter().min().unwrap_or(&0),
        sizes.iter().max().unwrap_or(&0)
    );
    Ok(())
}

pub fn visibility(cfg: &Config, a: VisibilityArgs) -> Result<(), CliError> {
    let mut section = cfg.visibility.clone();
    override_with(&mut section.depth_abs, a.depth_abs);
    override_with(&mut section.depth_rel, a.depth_rel);
    override_with(&mut section.normal_deg, a.normal_deg);
    override_with(&mut section.max_surface_distance, a.max_surface_distance);
    override_with(&mut section.decimation, a.decimation);
    if section.decimation == 0 {
        return Err(CliError::usage("--decimation must be at least 1"));
    }
    let model = open_scene(&a.scene)?;
    let mesh = load_mesh(&a.mesh)?;
    let ls = read_landmarks(&a.landmarks)?;
    let (table, diag) = compute_visibility(&model, &mesh, &ls, &section.to_core())?;
    write_visibility(&table, &a.out)?;
    eprintln!(
        "{} visible pairs over {} landmarks x {} images",
        diag.visible_pairs,
        table.landmark_ids().len(),
        table.image_ids().len()
    );
    if mesh.dropped_triangles() > 0 {
        eprintln!("dropped {} degenerate mesh triangles", mesh.dropped_triangles());
    }
    for (id, d) in &diag.excluded {
        eprintln!("excluded landmark {id}: {d:.3} m from the mesh");
    }
    Ok(())
}

fn part_path(out: &Path, g: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}_part{g}.{}", ext.to_string_lossy()),
        None => format!("{stem}_part{g}"),
    };
    out.with_file_name(name)
}

pub fn simulate(cfg: &Config, a: SimulateArgs) -> Result<(), CliError> {
    let mut section = cfg.simulate.clone();
    override_with(&mut section.noise_sigma_px, a.noise);
    override_with(&mut section.outlier_rate, a.outlier_rate);
    let model = open_scene(&a.scene)?;
    let ls = read_landmarks(&a.landmarks)?;
    let vt = read_visibility(&a.visibility)?;
    let sets = simulate_detections(&model, &ls, &vt, &section.to_core(a.seed))?;
    let total: usize = sets.values().map(DetectionSet::len).sum();

    let Some(parts) = a.partitions else {
        write_detections(&sets, &a.out)?;
        eprintln!("{total} detections over {} images", sets.len());
        return Ok(());
    };
    let p = read_partition(&parts)?;
    for g in 0..p.groups() {
        let group: BTreeMap<u32, DetectionSet> = sets
            .iter()
            .map(|(id, s)| (*id, s.filter(|l| p.group_of(l) == Some(g))))
            .collect();
        let path = part_path(&a.out, g);
        write_detections(&group, &path)?;
        eprintln!("{}", path.display());
    }
    eprintln!("{total} detections over {} images in {} groups", sets.len(), p.groups());
    Ok(())
}

pub fn localize(cfg: &Config, a: LocalizeArgs) -> Result<(), CliError> {
    let mut section = cfg.localize.clone();
    override_with(&mut section.weight_exp, a.weight_exp);
    override_with(&mut section.threshold_px, a.threshold);
    override_with(&mut section.max_iterations, a.max_iterations);
    override_with(&mut section.confidence, a.confidence);
    override_with(&mut section.min_inliers, a.min_inliers);
    override_with(&mut section.refinement, a.refinement);
    override_with(&mut section.sampling, a.sampling);
    let solver = section.to_core()?;
    solver.validate()?;

    let model = open_scene(&a.scene)?;
    let ls = read_landmarks(&a.landmarks)?;
    let maps = a
        .detections
        .iter()
        .map(read_detections)
        .collect::<Result<Vec<_>, _>>()?;
    let merged = merge_detection_maps(&maps)?;
    if let Some(id) = merged.keys().find(|id| model.image(**id).is_none()) {
        return Err(CliError::data(format!("detections reference image {id}, absent from the scene")));
    }

    let images: Vec<u32> = model.images().keys().copied().collect();
    let results = images
        .par_iter()
        .map(|&id| {
            let k = model.intrinsics_of(id).expect("loaded scenes are cross-referenced");
            let empty = DetectionSet::empty(id);
            let dets = merged.get(&id).unwrap_or(&empty);
            let start = Instant::now();
            let e = estimate(dets, &ls, k, &solver, image_seed(a.seed, id))?;
            Ok((PoseRecord::from_estimate(id, &e), start.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>, sceneloc::Error>>()?;

    let seconds: f64 = results.iter().map(|(_, s)| s).sum();
    let records: Vec<PoseRecord> = results.into_iter().map(|(r, _)| r).collect();
    let partitions = a.detections.len();
    let name = a
        .name
        .unwrap_or_else(|| format!("e{}_p{partitions}", section.weight_exp));
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(CliError::usage("--name must be a single non-empty token"));
    }
    let meta = format!(
        "{RUN_TAG} name={name} landmarks_per_partition={} partitions={partitions} weight_exp={} sec_per_image={}",
        ls.len() / partitions.max(1),
        section.weight_exp,
        seconds / records.len().max(1) as f64
    );
    write_poses_annotated(&records, &[meta], &a.out)?;
    let ok = records.iter().filter(|r| r.pose.is_some()).count();
    eprintln!("localized {ok}/{} images", records.len());
    Ok(())
}

/// Run label parsed from a pose file's `# run key=value ...` line; files
/// without one are labeled by their stem.
fn run_config_of(path: &Path) -> Result<(RunConfig, Option<f64>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut config = RunConfig {
        name: stem.split_whitespace().collect::<Vec<_>>().join("_"),
        landmarks_per_partition: 0,
        partitions: 1,
        weight_exponent: f64::NAN,
    };
    let mut seconds = None;
    let Some(line) = text
        .lines()
        .filter_map(|l| l.strip_prefix('#'))
        .map(str::trim)
        .find(|l| l.split_whitespace().next() == Some(RUN_TAG))
    else {
        return Ok((config, seconds));
    };
    let bad = |k: &str| CliError::data(format!("{}: invalid `{k}` in run line", path.display()));
    for kv in line.split_whitespace().skip(1) {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(bad(kv));
        };
        match k {
            "name" => config.name = v.to_string(),
            "landmarks_per_partition" => config.landmarks_per_partition = v.parse().map_err(|_| bad(k))?,
            "partitions" => config.partitions = v.parse().map_err(|_| bad(k))?,
            "weight_exp" => config.weight_exponent = v.parse().map_err(|_| bad(k))?,
            "sec_per_image" => seconds = Some(v.parse().map_err(|_| bad(k))?),
            _ => {}
        }
    }
    Ok((config, seconds))
}

pub fn evaluate(cfg: &Config, a: EvaluateArgs) -> Result<(), CliError> {
    let mut section = cfg.evaluate.clone();
    override_with(&mut section.rotation_deg, a.r_thresh);
    override_with(&mut section.position_m, a.t_thresh);
    let model = open_scene(&a.scene)?;
    let gt: BTreeMap<u32, Pose> = model.images().iter().map(|(id, im)| (*id, im.pose)).collect();

    let det_errors = match &a.landmarks {
        Some(lp) => {
            let ls = read_landmarks(lp)?;
            let maps = a
                .detections
                .iter()
                .map(read_detections)
                .collect::<Result<Vec<_>, _>>()?;
            detection_errors(&merge_detection_maps(&maps)?, &model, &ls)?
        }
        None => Vec::new(),
    };

    let mut runs = Vec::with_capacity(a.poses.len());
    for path in &a.poses {
        let (config, seconds_per_image) = run_config_of(path)?;
        if runs.iter().any(|r: &Run| r.config.name == config.name) {
            return Err(CliError::data(format!("duplicate run name `{}`", config.name)));
        }
        let estimates = read_poses(path)?
            .into_iter()
            .map(|(id, r)| {
                (
                    id,
                    ImageEstimate {
                        status: r.status,
                        pose: r.pose,
                    },
                )
            })
            .collect();
        runs.push(Run {
            config,
            estimates,
            detection_errors_deg: det_errors.clone(),
            seconds_per_image,
        });
    }

    let eval = build_report(&runs, &gt, section.rotation_deg, section.position_m)?;
    write_report(&eval.report, &a.out)?;
    if let Some(p) = &a.per_image {
        write_per_image_csv(&eval.images, p)?;
    }
    print!("{}", eval.report.to_text());
    Ok(())
}
