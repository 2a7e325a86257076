//! Progressive sample consensus over P3P hypotheses.
//!
//! Correspondences are ranked by weight and samples are drawn from a
//! growing prefix of the ranking following the PROSAC growth schedule, so
//! high-confidence detections are tried first. Once the prefix covers every
//! correspondence sampling is uniform, as in RANSAC.

use std::collections::BTreeSet;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::p3p::{p3p_solve, reprojection_error};
use super::{Correspondence, EstimateStatus, PoseEstimate, SamplingStrategy, SolverConfig};
use crate::scene::{Intrinsics, Pose};

const SAMPLE: usize = 3;

/// Indices sorted by weight (descending), ties by landmark id.
pub fn sampling_order(corrs: &[Correspondence]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..corrs.len()).collect();
    order.sort_by(|&a, &b| {
        corrs[b]
            .weight
            .total_cmp(&corrs[a].weight)
            .then(corrs[a].landmark_id.cmp(&corrs[b].landmark_id))
    });
    order
}

/// The PROSAC growth schedule for the prefix size `n`.
struct Schedule {
    n: usize,
    total: usize,
    /// `T_n` of the original formulation (real valued).
    t_n: f64,
    /// `T'_n`: iteration at which the prefix grows past `n`.
    t_prime: usize,
}

impl Schedule {
    fn new(total: usize, max_iter: usize) -> Self {
        let mut t_n = max_iter as f64;
        for i in 0..SAMPLE {
            t_n *= (SAMPLE - i) as f64 / (total - i) as f64;
        }
        Schedule {
            n: SAMPLE,
            total,
            t_n,
            t_prime: 1,
        }
    }

    /// Advances to iteration `t`; returns true if the sample must contain
    /// the newest prefix element.
    fn advance(&mut self, t: usize) -> bool {
        while t > self.t_prime && self.n < self.total {
            let n_next = self.n + 1;
            let t_next = self.t_n * n_next as f64 / (n_next - SAMPLE) as f64;
            self.t_prime += (t_next - self.t_n).ceil().max(0.0) as usize;
            self.t_n = t_next;
            self.n = n_next;
        }
        t <= self.t_prime
    }
}

fn draw_distinct(rng: &mut ChaCha8Rng, upto: usize, count: usize, out: &mut Vec<usize>) {
    while out.len() < count {
        let i = rng.random_range(0..upto);
        if !out.contains(&i) {
            out.push(i);
        }
    }
}

struct Hypothesis {
    pose: Pose,
    inliers: Vec<usize>,
    score: f64,
    mean_error: f64,
}

fn evaluate(pose: Pose, corrs: &[Correspondence], k: &Intrinsics, cfg: &SolverConfig) -> Hypothesis {
    let mut inliers = Vec::new();
    let mut weighted_err = 0.0;
    let mut weight_sum = 0.0;
    let mut score = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        if let Some(e) = reprojection_error(k, &pose, &c.xyz, &c.uv) {
            if e <= cfg.threshold_px {
                inliers.push(i);
                weighted_err += c.weight * e;
                weight_sum += c.weight;
                score += if cfg.weighted_scoring { c.weight } else { 1.0 };
            }
        }
    }
    let mean_error = if weight_sum > 0.0 {
        weighted_err / weight_sum
    } else if inliers.is_empty() {
        f64::INFINITY
    } else {
        0.0
    };
    Hypothesis {
        pose,
        inliers,
        score,
        mean_error,
    }
}

/// Iterations needed to draw an all-inlier sample with the configured
/// confidence at inlier ratio `ratio`.
pub fn adaptive_iterations(ratio: f64, confidence: f64) -> usize {
    if ratio >= 1.0 {
        return 1;
    }
    let p = ratio.powi(SAMPLE as i32);
    if p <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p).ln();
    if n.is_finite() {
        n.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Robust pose from 2D-3D correspondences.
pub fn prosac_estimate(corrs: &[Correspondence], k: &Intrinsics, cfg: &SolverConfig, seed: u64) -> PoseEstimate {
    let n = corrs.len();
    if n < SAMPLE + 1 {
        return PoseEstimate::failed(EstimateStatus::Insufficient, 0);
    }
    let order = sampling_order(corrs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut schedule = Schedule::new(n, cfg.max_iterations.max(1));

    let mut best: Option<Hypothesis> = None;
    let mut best_found_at = 0;
    let mut first_consensus_at = None;
    let mut needed = cfg.max_iterations;
    let mut t = 0;
    let mut sample = Vec::with_capacity(SAMPLE);
    while t < needed.min(cfg.max_iterations) {
        t += 1;
        sample.clear();
        match cfg.sampling {
            SamplingStrategy::Progressive => {
                if schedule.advance(t) {
                    sample.push(schedule.n - 1);
                    draw_distinct(&mut rng, schedule.n - 1, SAMPLE, &mut sample);
                } else {
                    draw_distinct(&mut rng, schedule.n, SAMPLE, &mut sample);
                }
            }
            SamplingStrategy::Uniform => draw_distinct(&mut rng, n, SAMPLE, &mut sample),
        }
        let idx = [order[sample[0]], order[sample[1]], order[sample[2]]];
        let points = idx.map(|i| corrs[i].xyz);
        let uv: [Vector2<f64>; 3] = idx.map(|i| corrs[i].uv);
        let Ok(solutions) = p3p_solve(&points, &uv, k) else { continue };
        for pose in solutions {
            let h = evaluate(pose, corrs, k, cfg);
            if first_consensus_at.is_none() && h.inliers.len() >= cfg.min_inliers {
                first_consensus_at = Some(t);
            }
            let better = match &best {
                None => true,
                Some(b) => h.score > b.score || (h.score == b.score && h.mean_error < b.mean_error),
            };
            if better {
                let ratio = h.inliers.len() as f64 / n as f64;
                needed = adaptive_iterations(ratio, cfg.confidence);
                best_found_at = t;
                best = Some(h);
            }
        }
    }

    let Some(best) = best else {
        return PoseEstimate::failed(EstimateStatus::Degenerate, t);
    };
    let inliers: BTreeSet<u32> = best.inliers.iter().map(|i| corrs[*i].landmark_id).collect();
    let status = if inliers.len() >= cfg.min_inliers {
        EstimateStatus::Ok
    } else {
        EstimateStatus::NoConsensus
    };
    let mean_reproj_px = mean_error(&best.pose, corrs, &best.inliers, k);
    PoseEstimate {
        pose: (status == EstimateStatus::Ok).then_some(best.pose),
        inliers,
        iterations: t,
        best_found_at,
        first_consensus_at,
        mean_reproj_px,
        status,
        refinement: None,
    }
}

/// Unweighted mean reprojection error over `subset`.
pub(crate) fn mean_error(pose: &Pose, corrs: &[Correspondence], subset: &[usize], k: &Intrinsics) -> f64 {
    if subset.is_empty() {
        return f64::NAN;
    }
    subset
        .iter()
        .map(|i| reprojection_error(k, pose, &corrs[*i].xyz, &corrs[*i].uv).unwrap_or(f64::INFINITY))
        .sum::<f64>()
        / subset.len() as f64
}
