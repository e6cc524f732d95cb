//! Model-to-scene registration.
//!
//! Static models are fit by weighted point-to-point ICP with a closed-form
//! SVD alignment step, run from many random initializations around the
//! operator's seed point. Articulated models run the same restarts at random
//! fixed joint angles, then refine pose and angle jointly with a constrained
//! derivative-free optimizer from the best restart.

pub mod cobyla;
mod icp;
mod refine;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{NearestCache, SpatialIndex};
use crate::geom::{Point3, RigidTransform, UnitQuaternion};

pub use icp::{icp_static, icp_static_traced, restart_fit_static, IcpTrace};
pub use refine::{hybrid_articulated_fit, nonlinear_refine, refit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("scene has no points")]
    EmptyScene,
    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondences(String),
    #[error("model is not articulated")]
    NotArticulated,
    #[error("joint angle {theta} outside limits [{min}, {max}]")]
    ThetaOutOfLimits { theta: f64, min: f64, max: f64 },
    #[error("invalid fit parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitParams {
    pub restarts: usize,
    pub max_iterations: usize,
    /// ICP stops once the RMS residual changes by less than this (m).
    pub residual_epsilon: f64,
    /// Restart offset standard deviation as a fraction of the model width.
    pub restart_sigma_fraction: f64,
    pub refine_max_evals: usize,
    pub refine_rho_begin: f64,
    pub refine_rho_end: f64,
    /// Slack on the unit-quaternion constraint during refinement.
    pub quaternion_tolerance: f64,
    pub seed: u64,
    /// Fan restarts out over the thread pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            restarts: 25,
            max_iterations: 100,
            residual_epsilon: 2.5e-8,
            restart_sigma_fraction: 1.0 / 3.0,
            refine_max_evals: 2000,
            refine_rho_begin: 0.05,
            refine_rho_end: 1e-6,
            quaternion_tolerance: 1e-2,
            seed: 0,
            parallel: true,
        }
    }
}

impl FitParams {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |what: &str| Err(FitError::InvalidParams(format!("{what} must be positive")));
        if self.restarts == 0 {
            return bad("restarts");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations");
        }
        if self.refine_max_evals == 0 {
            return bad("refine_max_evals");
        }
        for (name, v) in [
            ("residual_epsilon", self.residual_epsilon),
            ("restart_sigma_fraction", self.restart_sigma_fraction),
            ("refine_rho_begin", self.refine_rho_begin),
            ("refine_rho_end", self.refine_rho_end),
            ("quaternion_tolerance", self.quaternion_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name);
            }
        }
        if self.refine_rho_end > self.refine_rho_begin {
            return Err(FitError::InvalidParams(
                "refine_rho_end must not exceed refine_rho_begin".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub pose: RigidTransform,
    /// Joint angle; 0 for static models.
    pub theta: f64,
    /// RMS distance over inlier correspondences (m); infinite when degenerate.
    pub residual: f64,
    pub inliers: usize,
    pub likelihood: f64,
    pub converged: bool,
    /// ICP iterations, plus objective evaluations of any nonlinear stage.
    pub iterations: usize,
}

impl FitResult {
    pub(crate) fn new(
        pose: RigidTransform,
        theta: f64,
        residual: f64,
        inliers: usize,
        converged: bool,
        iterations: usize,
    ) -> Self {
        let mut r = Self {
            pose,
            theta,
            residual,
            inliers,
            likelihood: 0.0,
            converged,
            iterations,
        };
        r.likelihood = likelihood(&r);
        r
    }

    pub(crate) fn degenerate(pose: RigidTransform, theta: f64, iterations: usize) -> Self {
        Self::new(pose, theta, f64::INFINITY, 0, false, iterations)
    }
}

/// `inliers / residual`: infinite for a zero residual, zero without inliers.
pub fn likelihood(result: &FitResult) -> f64 {
    let n = result.inliers as f64;
    if result.inliers == 0 || !result.residual.is_finite() {
        0.0
    } else if result.residual == 0.0 {
        f64::INFINITY
    } else {
        n / result.residual
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// Posed model point.
    pub source: Point3,
    /// Nearest scene point.
    pub target: Point3,
    pub distance: f64,
    /// `1 / (1 + distance)`; zero for outliers.
    pub weight: f64,
    /// Farther than the model's maximum width.
    pub outlier: bool,
}

impl Correspondence {
    #[inline]
    pub(crate) fn new(source: Point3, target: Point3, distance: f64, max_width: f64) -> Self {
        let outlier = distance > max_width;
        Self {
            source,
            target,
            distance,
            weight: if outlier { 0.0 } else { 1.0 / (1.0 + distance) },
            outlier,
        }
    }
}

pub fn find_correspondences(
    posed: &[Point3],
    index: &SpatialIndex,
    max_width: f64,
) -> Result<Vec<Correspondence>, FitError> {
    let mut out = Vec::with_capacity(posed.len());
    correspondences_into(posed, &mut NearestCache::new(index, 0.0), max_width, &mut out)?;
    Ok(out)
}

pub(crate) fn correspondences_into(
    posed: &[Point3],
    cache: &mut NearestCache,
    max_width: f64,
    out: &mut Vec<Correspondence>,
) -> Result<(), FitError> {
    if cache.index().is_empty() {
        return Err(FitError::EmptyScene);
    }
    out.clear();
    for (i, p) in posed.iter().enumerate() {
        let nb = cache.nearest(i, p).map_err(|_| FitError::EmptyScene)?;
        out.push(Correspondence::new(*p, nb.point, nb.distance, max_width));
    }
    Ok(())
}

/// Candidate-list margin for point sets that move between queries, as a
/// fraction of the model width.
pub(crate) const CACHE_MARGIN: f64 = 0.02;

/// RMS distance and count over inliers.
pub(crate) fn inlier_stats(corrs: &[Correspondence]) -> (f64, usize) {
    let (sum, n) = corrs
        .iter()
        .filter(|c| !c.outlier)
        .fold((0.0, 0usize), |(s, n), c| (s + c.distance * c.distance, n + 1));
    if n == 0 {
        (f64::INFINITY, 0)
    } else {
        ((sum / n as f64).sqrt(), n)
    }
}

/// Rigid transform minimizing `Σ w ‖R p + t − s‖²` over inlier pairs.
pub fn weighted_svd_align(corrs: &[Correspondence]) -> Result<RigidTransform, FitError> {
    let mut wsum = 0.0;
    let mut ps = Point3::zeros();
    let mut ss = Point3::zeros();
    let mut n = 0;
    for c in corrs.iter().filter(|c| !c.outlier) {
        wsum += c.weight;
        ps += c.source * c.weight;
        ss += c.target * c.weight;
        n += 1;
    }
    if n < 3 || !(wsum > 0.0) {
        return Err(FitError::DegenerateCorrespondences(format!(
            "{n} inlier correspondences, need 3"
        )));
    }
    let pc = ps / wsum;
    let sc = ss / wsum;
    let mut h = Matrix3::zeros();
    for c in corrs.iter().filter(|c| !c.outlier) {
        h += (c.source - pc) * (c.target - sc).transpose() * c.weight;
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv = svd.singular_values;
    // nalgebra does not sort singular values for 3x3; order them to test rank.
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[1] > 1e-12 * sv[0]) {
        return Err(FitError::DegenerateCorrespondences(
            "correspondences are collinear".into(),
        ));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d)) * u.transpose();
    let q = UnitQuaternion::from_rotation_matrix(&r);
    let t = sc - crate::geom::rotate_point(&q, &pc);
    Ok(RigidTransform::new(q, t))
}

/// Independent stream per (seed, stream) pair.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotation_error;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairs(src: &[Point3], pose: &RigidTransform) -> Vec<Correspondence> {
        src.iter()
            .map(|p| Correspondence::new(*p, pose.apply(p), 0.0, 1.0))
            .collect()
    }

    fn cloud(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
            .collect()
    }

    #[test]
    fn correspondence_weights() {
        let c = Correspondence::new(Point3::zeros(), Point3::zeros(), 0.0, 0.3);
        assert_eq!((c.weight, c.outlier), (1.0, false));
        let c = Correspondence::new(Point3::zeros(), Point3::x(), 1.0, 0.3);
        assert!(c.outlier);
        let c = Correspondence::new(Point3::zeros(), Point3::x(), 1.0, 2.0);
        assert_eq!(c.weight, 0.5);
    }

    #[test]
    fn find_correspondences_on_scene() {
        let scene = vec![Point3::zeros(), Point3::new(1.0, 0.0, 0.0)];
        let idx = SpatialIndex::from_points(&scene);
        let c = find_correspondences(&[Point3::new(0.9, 0.0, 0.0), Point3::zeros()], &idx, 0.3).unwrap();
        assert_eq!(c[0].target, scene[1]);
        assert!((c[0].distance - 0.1).abs() < 1e-15);
        assert_eq!(c[1].distance, 0.0);
        let empty = SpatialIndex::from_points(&[]);
        assert_eq!(find_correspondences(&[Point3::zeros()], &empty, 1.0), Err(FitError::EmptyScene));
    }

    #[test]
    fn likelihood_rules() {
        let mut r = FitResult::new(RigidTransform::IDENTITY, 0.0, 2.0, 400, true, 1);
        assert_eq!(likelihood(&r), 200.0);
        r.inliers = 0;
        assert_eq!(likelihood(&r), 0.0);
        r.inliers = 10;
        r.residual = 0.0;
        assert_eq!(likelihood(&r), f64::INFINITY);
        let good = FitResult::new(RigidTransform::IDENTITY, 0.0, 0.001, 390, true, 1);
        let bad = FitResult::new(RigidTransform::IDENTITY, 0.0, 0.004, 250, true, 1);
        assert!(good.likelihood > bad.likelihood);
    }

    #[test]
    fn align_identity() {
        let pts = cloud(50, 1);
        let t = weighted_svd_align(&pairs(&pts, &RigidTransform::IDENTITY)).unwrap();
        assert!(t.translation.norm() < 1e-14);
        assert!(rotation_error(&t.rotation, &UnitQuaternion::IDENTITY) < 1e-14);
    }

    #[test]
    fn align_coplanar_points() {
        let mut pts = cloud(40, 2);
        for p in &mut pts {
            p.z = 0.0;
        }
        let pose = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 2.5),
            Vector3::new(0.3, -1.0, 2.0),
        );
        let t = weighted_svd_align(&pairs(&pts, &pose)).unwrap();
        assert!((t.translation - pose.translation).norm() < 1e-9);
        assert!(rotation_error(&t.rotation, &pose.rotation) < 1e-9);
    }

    #[test]
    fn align_rejects_degenerate_input() {
        let line: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            weighted_svd_align(&pairs(&line, &RigidTransform::IDENTITY)),
            Err(FitError::DegenerateCorrespondences(_))
        ));
        let two = cloud(2, 3);
        assert!(matches!(
            weighted_svd_align(&pairs(&two, &RigidTransform::IDENTITY)),
            Err(FitError::DegenerateCorrespondences(_))
        ));
        // Outliers do not count toward the minimum.
        let mut c = pairs(&cloud(5, 4), &RigidTransform::IDENTITY);
        for x in c.iter_mut().take(3) {
            *x = Correspondence::new(x.source, x.target, 5.0, 1.0);
        }
        assert!(weighted_svd_align(&c).is_err());
    }

    #[test]
    fn weights_bias_the_solution() {
        // Two inconsistent targets for one source set: the heavier one wins.
        let pts = cloud(30, 5);
        let a = RigidTransform::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let mut c = pairs(&pts, &a);
        for x in &mut c {
            x.weight = 1.0;
        }
        let mut far: Vec<Correspondence> = pts
            .iter()
            .map(|p| Correspondence { source: *p, target: p + Vector3::new(-0.1, 0.0, 0.0), distance: 0.0, weight: 0.25, outlier: false })
            .collect();
        c.append(&mut far);
        let t = weighted_svd_align(&c).unwrap();
        // Weighted mean of +0.1 (w=1) and -0.1 (w=0.25).
        assert!((t.translation.x - 0.06).abs() < 1e-12, "{}", t.translation.x);
    }

    #[test]
    fn params_validation() {
        assert!(FitParams::default().validate().is_ok());
        let p = FitParams { restarts: 0, ..FitParams::default() };
        assert!(p.validate().is_err());
        let p = FitParams { residual_epsilon: -1.0, ..FitParams::default() };
        assert!(p.validate().is_err());
        let parsed: FitParams = toml::from_str("restarts = 5\nseed = 9").unwrap();
        assert_eq!((parsed.restarts, parsed.seed, parsed.max_iterations), (5, 9, 100));
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(derive_seed(0, 0), derive_seed(1, 0));
    }

    proptest! {
        #[test]
        fn align_recovers_random_transforms(
            axis in prop::array::uniform3(-1.0..1.0f64),
            angle in 0.0..std::f64::consts::PI,
            t in prop::array::uniform3(-2.0..2.0f64),
            seed in any::<u64>(),
        ) {
            prop_assume!(Vector3::from(axis).norm() > 1e-3);
            let pose = RigidTransform::new(
                UnitQuaternion::from_axis_angle(&Vector3::from(axis), angle),
                Vector3::from(t),
            );
            let pts = cloud(100, seed);
            let est = weighted_svd_align(&pairs(&pts, &pose)).unwrap();
            prop_assert!((est.translation - pose.translation).norm() < 1e-9);
            prop_assert!(rotation_error(&est.rotation, &pose.rotation) < 1e-9);
        }
    }
}
