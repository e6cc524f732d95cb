use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    correspondences_into, derive_seed, inlier_stats, weighted_svd_align, Correspondence, FitError,
    FitParams, FitResult, CACHE_MARGIN,
};
use crate::cloud::{NearestCache, SpatialIndex};
use crate::exec;
use crate::geom::{Point3, RigidTransform, UnitQuaternion};
use crate::model::SampledModel;

/// Accepted-iteration residuals of one ICP run, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IcpTrace {
    pub residuals: Vec<f64>,
}

/// ICP from `init` with the moving link (if any) held at zero.
///
/// Degenerate correspondences yield a non-converged result with infinite
/// residual rather than an error.
pub fn icp_static(
    sm: &SampledModel,
    index: &SpatialIndex,
    init: &RigidTransform,
    params: &FitParams,
) -> Result<FitResult, FitError> {
    icp_static_traced(sm, index, init, params).map(|(r, _)| r)
}

pub fn icp_static_traced(
    sm: &SampledModel,
    index: &SpatialIndex,
    init: &RigidTransform,
    params: &FitParams,
) -> Result<(FitResult, IcpTrace), FitError> {
    params.validate()?;
    if index.is_empty() {
        return Err(FitError::EmptyScene);
    }
    let mut trace = IcpTrace::default();
    let local = sm.local_points(0.0);
    let r = icp_points(&local, sm.max_width, index, init, 0.0, params, Some(&mut trace));
    Ok((r, trace))
}

/// Core loop over model-frame points at a fixed joint angle `theta`.
///
/// A new pose is accepted only if its inlier RMS does not exceed the last
/// accepted one; the first rejected step ends the run as converged.
pub(crate) fn icp_points(
    local: &[Point3],
    max_width: f64,
    index: &SpatialIndex,
    init: &RigidTransform,
    theta: f64,
    params: &FitParams,
    mut trace: Option<&mut IcpTrace>,
) -> FitResult {
    let mut pose = *init;
    let mut posed: Vec<Point3> = Vec::with_capacity(local.len());
    let mut corrs: Vec<Correspondence> = Vec::with_capacity(local.len());
    let mut cache = NearestCache::new(index, CACHE_MARGIN * max_width);
    let mut best: Option<(RigidTransform, f64, usize)> = None;
    let mut converged = false;
    let mut aligned = 0;
    for iter in 0..=params.max_iterations {
        posed.clear();
        posed.extend(local.iter().map(|p| pose.apply(p)));
        if correspondences_into(&posed, &mut cache, max_width, &mut corrs).is_err() {
            break;
        }
        let (residual, inliers) = inlier_stats(&corrs);
        if inliers < 3 {
            break;
        }
        if let Some((_, prev, _)) = best {
            if residual > prev {
                converged = true;
                break;
            }
            best = Some((pose, residual, inliers));
            if let Some(t) = trace.as_deref_mut() {
                t.residuals.push(residual);
            }
            if prev - residual < params.residual_epsilon {
                converged = true;
                break;
            }
        } else {
            best = Some((pose, residual, inliers));
            if let Some(t) = trace.as_deref_mut() {
                t.residuals.push(residual);
            }
        }
        if iter == params.max_iterations {
            break;
        }
        // Align model-frame points directly so the result is an absolute pose.
        for (c, p) in corrs.iter_mut().zip(local) {
            c.source = *p;
        }
        match weighted_svd_align(&corrs) {
            Ok(next) => pose = next,
            Err(_) => break,
        }
        aligned += 1;
    }
    match best {
        Some((pose, residual, inliers)) => {
            FitResult::new(pose, theta, residual, inliers, converged, aligned)
        }
        None => FitResult::degenerate(*init, theta, aligned),
    }
}

/// Best of `params.restarts` ICP runs from random poses around `seed_point`.
pub fn restart_fit_static(
    sm: &SampledModel,
    index: &SpatialIndex,
    seed_point: &Point3,
    params: &FitParams,
) -> Result<FitResult, FitError> {
    params.validate()?;
    if index.is_empty() {
        return Err(FitError::EmptyScene);
    }
    let local = sm.local_points(0.0);
    let center = centroid(&local);
    let runs = exec::map_range(params.restarts, params.parallel, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, r as u64));
        let init = restart_pose(&mut rng, seed_point, &center, sm.max_width, params);
        icp_points(&local, sm.max_width, index, &init, 0.0, params, None)
    });
    Ok(select_best(runs))
}

/// Lowest residual wins; ties go to the earliest restart.
pub(crate) fn select_best(runs: Vec<FitResult>) -> FitResult {
    let mut iter = runs.into_iter();
    let mut best = iter.next().expect("at least one restart");
    for r in iter {
        if r.residual < best.residual {
            best = r;
        }
    }
    best
}

pub(crate) fn centroid(points: &[Point3]) -> Point3 {
    if points.is_empty() {
        return Point3::zeros();
    }
    points.iter().sum::<Point3>() / points.len() as f64
}

/// Uniform orientation; the model centroid lands at the seed point plus a
/// normal offset truncated to the model width.
pub(crate) fn restart_pose(
    rng: &mut ChaCha8Rng,
    seed_point: &Point3,
    model_center: &Point3,
    max_width: f64,
    params: &FitParams,
) -> RigidTransform {
    let q = random_rotation(rng);
    let offset = bounded_offset(rng, max_width, params.restart_sigma_fraction);
    let t = seed_point + offset - crate::geom::rotate_point(&q, model_center);
    RigidTransform::new(q, t)
}

/// Uniform on SO(3) (Shoemake's subgroup method).
pub(crate) fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    UnitQuaternion::new_normalize(b * u3.cos(), a * u2.sin(), a * u2.cos(), b * u3.sin())
        .unwrap_or(UnitQuaternion::IDENTITY)
}

/// Per-axis `N(0, (width·fraction)²)`, redrawn while longer than `width`.
pub(crate) fn bounded_offset(rng: &mut ChaCha8Rng, width: f64, fraction: f64) -> Point3 {
    let sigma = width * fraction;
    if !(sigma > 0.0) {
        return Point3::zeros();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    loop {
        let v = Point3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        if v.norm() <= width {
            return v;
        }
    }
}
