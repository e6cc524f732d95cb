use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cobyla::{self, CobylaOptions, CobylaStatus};
use super::icp::{centroid, icp_points, restart_pose, select_best};
use super::{
    correspondences_into, derive_seed, inlier_stats, FitError, FitParams, FitResult, CACHE_MARGIN,
};
use crate::cloud::{NearestCache, SpatialIndex};
use crate::exec;
use crate::geom::{Point3, RigidTransform, UnitQuaternion};
use crate::model::{posed_points_into, ObjectModel, RevoluteJoint, SampledModel};

fn articulated_joint(model: &ObjectModel, sm: &SampledModel) -> Result<RevoluteJoint, FitError> {
    match (model.joint(), sm.joint) {
        (Some(j), Some(_)) if !sm.moving_points.is_empty() => Ok(*j),
        _ => Err(FitError::NotArticulated),
    }
}

fn check_theta(joint: &RevoluteJoint, theta: f64) -> Result<(), FitError> {
    if joint.contains(theta) {
        Ok(())
    } else {
        Err(FitError::ThetaOutOfLimits {
            theta,
            min: joint.theta_min(),
            max: joint.theta_max(),
        })
    }
}

/// Inlier RMS and count at a given state.
fn score(sm: &SampledModel, index: &SpatialIndex, pose: &RigidTransform, theta: f64) -> (f64, usize) {
    let mut posed = Vec::with_capacity(sm.len());
    let mut corrs = Vec::with_capacity(sm.len());
    posed_points_into(sm, pose, theta, &mut posed);
    match correspondences_into(&posed, &mut NearestCache::new(index, 0.0), sm.max_width, &mut corrs) {
        Ok(()) => inlier_stats(&corrs),
        Err(_) => (f64::INFINITY, 0),
    }
}

/// Jointly refines pose and joint angle from `(init_pose, init_theta)`.
///
/// Minimizes the weighted squared correspondence distance over the
/// quaternion, translation and angle, with `‖q‖² = 1` held to within
/// `params.quaternion_tolerance` by a pair of inequalities and the angle
/// bounded by the joint limits. Correspondences are recomputed at every
/// evaluation. Never returns a state with a larger residual than the input.
pub fn nonlinear_refine(
    model: &ObjectModel,
    sm: &SampledModel,
    index: &SpatialIndex,
    init_pose: &RigidTransform,
    init_theta: f64,
    params: &FitParams,
) -> Result<FitResult, FitError> {
    params.validate()?;
    let joint = articulated_joint(model, sm)?;
    check_theta(&joint, init_theta)?;
    if index.is_empty() {
        return Err(FitError::EmptyScene);
    }
    let (init_res, init_n) = score(sm, index, init_pose, init_theta);

    let mw = sm.max_width;
    let eps = params.quaternion_tolerance;
    let (lo, hi) = (joint.theta_min(), joint.theta_max());
    // Translation is optimized in units of half the model width so that a
    // unit step in any variable moves the samples by a comparable distance.
    let t_unit = (0.5 * mw).max(1e-3);
    let unscale = |y: &[f64]| -> [f64; 8] {
        let mut x = [0.0; 8];
        x.copy_from_slice(y);
        for v in &mut x[4..7] {
            *v *= t_unit;
        }
        x
    };
    let mut posed = Vec::with_capacity(sm.len());
    let mut cache = NearestCache::new(index, CACHE_MARGIN * mw);
    let mut objective = |y: &[f64], c: &mut [f64]| -> f64 {
        let x = unscale(y);
        let n2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3];
        c[0] = eps - (n2 - 1.0);
        c[1] = eps + (n2 - 1.0);
        c[2] = x[7] - lo;
        c[3] = hi - x[7];
        let Some(q) = UnitQuaternion::new_normalize(x[0], x[1], x[2], x[3]) else {
            return mw * mw;
        };
        let pose = RigidTransform::new(q, Point3::new(x[4], x[5], x[6]));
        posed_points_into(sm, &pose, x[7].clamp(lo, hi), &mut posed);
        // Distances are capped at the model width: outliers contribute a
        // constant and the objective stays continuous.
        let mut sum = 0.0;
        for (i, p) in posed.iter().enumerate() {
            let d = match cache.nearest(i, p) {
                Ok(nb) => nb.distance.min(mw),
                Err(_) => mw,
            };
            sum += d * d / (1.0 + d);
        }
        sum / posed.len() as f64
    };
    // The solver is restarted from its own result until the inlier RMS stops
    // improving by more than the ICP threshold, sharing one evaluation budget.
    let (mut pose, mut theta, mut res, mut n) = (*init_pose, init_theta, init_res, init_n);
    let mut evals = 0;
    let mut converged = false;
    while evals < params.refine_max_evals {
        let q0 = pose.rotation;
        let t0 = pose.translation;
        let y0 = [q0.w(), q0.x(), q0.y(), q0.z(), t0.x / t_unit, t0.y / t_unit, t0.z / t_unit, theta];
        let opts = CobylaOptions {
            rho_begin: params.refine_rho_begin,
            rho_end: params.refine_rho_end,
            max_evals: params.refine_max_evals - evals,
        };
        let out = cobyla::minimize(&mut objective, &y0, 4, &opts);
        evals += out.evals;
        converged = out.status == CobylaStatus::Converged;
        let x = unscale(&out.x);
        let Some(q) = UnitQuaternion::new_normalize(x[0], x[1], x[2], x[3]) else {
            break;
        };
        let cand = RigidTransform::new(q, Point3::new(x[4], x[5], x[6]));
        let cand_theta = x[7].clamp(lo, hi);
        if !cand.is_finite() || !cand_theta.is_finite() {
            break;
        }
        let (cand_res, cand_n) = score(sm, index, &cand, cand_theta);
        if !(cand_res <= res) {
            break;
        }
        let gain = res - cand_res;
        (pose, theta, res, n) = (cand, cand_theta, cand_res, cand_n);
        if !converged || gain < params.residual_epsilon {
            break;
        }
    }
    if n == 0 {
        return Ok(FitResult::degenerate(pose, theta, evals));
    }
    Ok(FitResult::new(pose, theta, res, n, converged, evals))
}

/// Random restarts at random fixed joint angles, each solved by ICP, then
/// one joint refinement from the best restart.
pub fn hybrid_articulated_fit(
    model: &ObjectModel,
    sm: &SampledModel,
    index: &SpatialIndex,
    seed_point: &Point3,
    params: &FitParams,
) -> Result<FitResult, FitError> {
    params.validate()?;
    let joint = articulated_joint(model, sm)?;
    if index.is_empty() {
        return Err(FitError::EmptyScene);
    }
    let (lo, hi) = (joint.theta_min(), joint.theta_max());
    let runs = exec::map_range(params.restarts, params.parallel, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, r as u64));
        // One random angle per equal-width stratum of the joint range.
        let u: f64 = rng.random();
        let theta = (lo + (hi - lo) * (r as f64 + u) / params.restarts as f64).min(hi);
        let local = sm.local_points(theta);
        let init = restart_pose(&mut rng, seed_point, &centroid(&local), sm.max_width, params);
        icp_points(&local, sm.max_width, index, &init, theta, params, None)
    });
    let best = select_best(runs);
    if !best.residual.is_finite() {
        return Ok(best);
    }
    let mut refined = nonlinear_refine(model, sm, index, &best.pose, best.theta, params)?;
    refined.iterations += best.iterations;
    Ok(refined)
}

/// Fit from an operator-corrected state without restarts.
///
/// A state whose residual cannot be lowered by at least
/// `params.residual_epsilon` is already converged and is returned as is.
pub fn refit(
    model: &ObjectModel,
    sm: &SampledModel,
    index: &SpatialIndex,
    corrected_pose: &RigidTransform,
    corrected_theta: f64,
    params: &FitParams,
) -> Result<FitResult, FitError> {
    params.validate()?;
    if index.is_empty() {
        return Err(FitError::EmptyScene);
    }
    let joint = articulated_joint(model, sm).ok();
    let theta = match &joint {
        Some(j) => {
            check_theta(j, corrected_theta)?;
            corrected_theta
        }
        None => 0.0,
    };
    let (res0, n0) = score(sm, index, corrected_pose, theta);
    let local = sm.local_points(theta);
    let icp = icp_points(&local, sm.max_width, index, corrected_pose, theta, params, None);
    let result = if joint.is_some() {
        let start = if icp.residual.is_finite() { icp.pose } else { *corrected_pose };
        let mut refined = nonlinear_refine(model, sm, index, &start, theta, params)?;
        refined.iterations += icp.iterations;
        refined
    } else {
        icp
    };
    if n0 > 0 && !(result.residual < res0 - params.residual_epsilon) {
        return Ok(FitResult::new(*corrected_pose, theta, res0, n0, true, result.iterations));
    }
    Ok(result)
}
