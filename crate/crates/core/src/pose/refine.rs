//! Weighted Levenberg-Marquardt refinement of a camera pose.
//!
//! The pose is updated as `R ← exp([δω]×) R`, `t ← t + δt`, so the
//! camera-frame point `p_c = R p + t` moves by `−[R p]× δω + δt` to first
//! order.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};

use super::{Correspondence, Refinement, SolverConfig};
use crate::error::{Error, Result};
use crate::scene::{Intrinsics, Pose};

pub const MAX_ITERATIONS: usize = 100;
pub const STEP_TOL: f64 = 1e-10;
/// Relative cost decrease below which an accepted step ends the search.
pub const DECREASE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Applies the increment `[δω, δt]`.
pub fn apply_increment(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    let r = Rotation3::new(w) * Rotation3::from_matrix_unchecked(*pose.rotation());
    Pose::from_rotation(&r, pose.translation() + dt)
}

/// Jacobian of the projected pixel with respect to `[δω, δt]`.
pub fn reprojection_jacobian(k: &Intrinsics, pose: &Pose, p: &Vector3<f64>) -> Matrix2x6<f64> {
    let rp = pose.rotation() * p;
    let pc = rp + pose.translation();
    let iz = 1.0 / pc.z;
    let d_proj = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    );
    let mut j = Matrix2x6::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(d_proj * -skew(&rp)));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
    j
}

fn residual(k: &Intrinsics, pose: &Pose, c: &Correspondence) -> Option<Vector2<f64>> {
    let pc = pose.transform(&c.xyz);
    (pc.z > 0.0).then(|| Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - c.uv)
}

/// `Σ wᵢ ‖rᵢ‖²`, or `None` if a point is not in front of the camera.
pub fn weighted_cost(k: &Intrinsics, pose: &Pose, corrs: &[Correspondence], weights: &[f64]) -> Option<f64> {
    let mut cost = 0.0;
    for (c, w) in corrs.iter().zip(weights) {
        cost += w * residual(k, pose, c)?.norm_squared();
    }
    Some(cost)
}

/// Minimizes the (optionally weighted) reprojection cost from `initial`.
///
/// Steps that raise the cost or push a point behind the camera are
/// rejected and damping increases. The returned pose is the best iterate.
pub fn refine_weighted(
    initial: &Pose,
    corrs: &[Correspondence],
    k: &Intrinsics,
    cfg: &SolverConfig,
) -> Result<(Pose, RefineReport)> {
    if corrs.len() < 4 {
        return Err(Error::InvalidInput(format!("refinement needs 4 correspondences, got {}", corrs.len())));
    }
    let weights: Vec<f64> = match cfg.refinement {
        Refinement::Unweighted => vec![1.0; corrs.len()],
        _ => corrs.iter().map(|c| c.weight).collect(),
    };
    let Some(mut cost) = weighted_cost(k, initial, corrs, &weights) else {
        return Err(Error::InvalidInput("initial pose puts a point behind the camera".into()));
    };
    let mut pose = *initial;
    let mut report = RefineReport {
        initial_cost: cost,
        final_cost: cost,
        iterations: 0,
        converged: false,
        cost_history: vec![cost],
    };
    let mut lambda = 1e-3;

    while report.iterations < MAX_ITERATIONS {
        report.iterations += 1;
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (c, w) in corrs.iter().zip(&weights) {
            let r = residual(k, &pose, c).expect("accepted poses keep positive depth");
            let j = reprojection_jacobian(k, &pose, &c.xyz);
            h += j.transpose() * j * *w;
            g += j.transpose() * r * *w;
        }
        if cost == 0.0 || g.norm() == 0.0 {
            report.converged = true;
            break;
        }
        let mut damped = h;
        for i in 0..6 {
            damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
        }
        let Some(delta) = damped.cholesky().map(|ch| ch.solve(&-g)) else {
            lambda *= 10.0;
            continue;
        };
        if delta.norm() < STEP_TOL {
            report.converged = true;
            break;
        }
        let candidate = apply_increment(&pose, &delta);
        match weighted_cost(k, &candidate, corrs, &weights) {
            Some(next) if next < cost => {
                let decrease = (cost - next) / cost;
                pose = candidate;
                cost = next;
                report.cost_history.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                if decrease < DECREASE_TOL {
                    report.converged = true;
                    break;
                }
            }
            _ => {
                lambda *= 10.0;
                if lambda > 1e16 {
                    report.converged = true;
                    break;
                }
            }
        }
    }
    report.final_cost = cost;
    Ok((pose, report))
}
