use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EvalError, GroundTruthObject};
use crate::cloud::PointCloud;
use crate::fit::derive_seed;
use crate::geom::{Point3, RigidTransform};
use crate::model::{sample_surface, ObjectModel};

/// A model placed in a synthetic scene.
#[derive(Clone, Copy, Debug)]
pub struct SceneObject<'a> {
    pub model: &'a ObjectModel,
    pub pose: RigidTransform,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub cloud: PointCloud,
    /// Parallel to the input objects.
    pub truth: Vec<GroundTruthObject>,
}

/// Samples each posed model surface at `density` points/m², removes a
/// contiguous azimuthal wedge holding `occlusion` of each object's points
/// (measured about the object's vertical through its centroid), then adds
/// isotropic Gaussian noise. Deterministic per `seed`.
pub fn generate_scene(
    objects: &[SceneObject<'_>],
    density: f64,
    noise_sigma: f64,
    occlusion: f64,
    seed: u64,
) -> Result<GeneratedScene, EvalError> {
    if !(density > 0.0 && density.is_finite()) {
        return Err(EvalError::Scene("density must be positive".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(EvalError::Scene("noise sigma must be non-negative".into()));
    }
    if !(0.0..1.0).contains(&occlusion) {
        return Err(EvalError::Scene("occlusion must lie in [0, 1)".into()));
    }
    let mut points = Vec::new();
    let mut truth = Vec::with_capacity(objects.len());
    for (i, obj) in objects.iter().enumerate() {
        if let Some(j) = obj.model.joint() {
            if !j.contains(obj.theta) {
                return Err(EvalError::Scene(format!(
                    "theta {} outside the limits of {}",
                    obj.theta, obj.model.name
                )));
            }
        }
        let mesh = obj.model.mesh_at(obj.theta).transformed(&obj.pose);
        let n = ((mesh.surface_area() * density).round() as usize).max(1);
        let surface = sample_surface(&mesh, n, derive_seed(seed, 2 * i as u64))
            .map_err(|e| EvalError::Scene(format!("{}: {e}", obj.model.name)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * i as u64 + 1));
        let kept = occlude(surface, occlusion, &mut rng);
        if noise_sigma > 0.0 {
            let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
            points.extend(kept.into_iter().map(|p| {
                p + Point3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng))
            }));
        } else {
            points.extend(kept);
        }
        let theta = if obj.model.is_articulated() { obj.theta } else { 0.0 };
        truth.push(GroundTruthObject::new(&obj.model.name, obj.pose, theta, &obj.model.symmetries));
    }
    Ok(GeneratedScene {
        cloud: PointCloud::new(points),
        truth,
    })
}

/// Drops `round(fraction · n)` points forming one azimuthal wedge that starts
/// at a random angle. Survivors keep their order.
fn occlude(points: Vec<Point3>, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let start: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let drop = (fraction * points.len() as f64).round() as usize;
    if drop == 0 || points.is_empty() {
        return points;
    }
    let c = points.iter().sum::<Point3>() / points.len() as f64;
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (((p.y - c.y).atan2(p.x - c.x) - start).rem_euclid(std::f64::consts::TAU), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut removed = vec![false; points.len()];
    for &(_, i) in &order[..drop] {
        removed[i] = true;
    }
    points
        .into_iter()
        .zip(removed)
        .filter(|(_, r)| !r)
        .map(|(p, _)| p)
        .collect()
}
