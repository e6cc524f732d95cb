use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelError, TriMesh};
use crate::geom::Point3;

/// Triangles smaller than this (m²) carry no sampling weight.
const MIN_TRIANGLE_AREA: f64 = 1e-18;

/// Draws exactly `n` points uniformly over the mesh surface.
///
/// Triangles are chosen by systematic sampling along the cumulative area
/// (one random offset, `n` evenly spaced strata), so each triangle receives
/// within one point of its area share. Positions inside a triangle are
/// uniform. Output is deterministic for a given `seed`.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<Vec<Point3>, ModelError> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut tris = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        let a = mesh.triangle_area(t);
        if a > MIN_TRIANGLE_AREA {
            total += a;
            cumulative.push(total);
            tris.push(t);
        }
    }
    if tris.is_empty() || !total.is_finite() {
        return Err(ModelError::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset: f64 = rng.random();
    let step = total / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut tri = 0;
    for k in 0..n {
        let target = (k as f64 + offset) * step;
        while tri + 1 < cumulative.len() && cumulative[tri] <= target {
            tri += 1;
        }
        let [a, b, c] = mesh.corners(tris[tri]);
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        out.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::primitives::box_mesh;
    use nalgebra::Vector3;

    fn point_triangle_distance(p: &Point3, [a, b, c]: [Point3; 3]) -> f64 {
        // Distance to the plane plus an inside test via barycentric signs.
        let n = (b - a).cross(&(c - a)).normalize();
        let d = (p - a).dot(&n);
        let proj = p - n * d;
        let inside = [(a, b), (b, c), (c, a)]
            .iter()
            .all(|(u, v)| (v - u).cross(&(proj - u)).dot(&n) >= -1e-12);
        if inside {
            d.abs()
        } else {
            f64::INFINITY
        }
    }

    #[test]
    fn single_triangle_containment() {
        let mesh = TriMesh::new(
            vec![Point3::zeros(), Point3::x(), Point3::y()],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let pts = sample_surface(&mesh, 3, 42).unwrap();
        assert_eq!(pts.len(), 3);
        for p in pts {
            assert!(p.x >= 0.0 && p.y >= 0.0 && p.x + p.y <= 1.0 + 1e-15 && p.z == 0.0);
        }
    }

    #[test]
    fn cube_faces_receive_equal_share() {
        let cube = box_mesh(Vector3::repeat(0.5), Point3::repeat(0.5));
        let pts = sample_surface(&cube, 6000, 11).unwrap();
        let mut counts = [0usize; 6];
        for p in &pts {
            let face = [
                (p.x - 0.0).abs(),
                (p.x - 1.0).abs(),
                (p.y - 0.0).abs(),
                (p.y - 1.0).abs(),
                (p.z - 0.0).abs(),
                (p.z - 1.0).abs(),
            ]
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
            counts[face] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 50.0, "{counts:?}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cube = box_mesh(Vector3::repeat(0.5), Point3::zeros());
        assert_eq!(
            sample_surface(&cube, 400, 5).unwrap(),
            sample_surface(&cube, 400, 5).unwrap()
        );
        assert_ne!(
            sample_surface(&cube, 400, 5).unwrap(),
            sample_surface(&cube, 400, 6).unwrap()
        );
    }

    #[test]
    fn samples_lie_on_surface() {
        let cube = box_mesh(Vector3::new(0.1, 0.2, 0.3), Point3::new(1.0, 0.0, -1.0));
        for p in sample_surface(&cube, 500, 1).unwrap() {
            let d = (0..cube.triangles.len())
                .map(|t| point_triangle_distance(&p, cube.corners(t)))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-9);
        }
    }

    #[test]
    fn degenerate_mesh_is_empty() {
        let mesh = TriMesh::new(
            vec![Point3::zeros(), Point3::x(), Point3::x() * 2.0],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(matches!(sample_surface(&mesh, 10, 0), Err(ModelError::EmptyMesh)));
        assert!(matches!(
            sample_surface(&TriMesh::default(), 10, 0),
            Err(ModelError::EmptyMesh)
        ));
    }
}
