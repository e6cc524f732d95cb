//! Closed triangle meshes of simple solids, used for synthetic objects.

use nalgebra::Vector3;

use super::TriMesh;
use crate::geom::{Point3, RigidTransform, UnitQuaternion};

/// Axis-aligned box, 8 vertices and 12 outward-facing triangles.
pub fn box_mesh(half_extents: Vector3<f64>, center: Point3) -> TriMesh {
    let h = half_extents;
    let vertices = (0..8)
        .map(|i| {
            let s = |bit: usize| if i & bit != 0 { 1.0 } else { -1.0 };
            center + Vector3::new(s(1) * h.x, s(2) * h.y, s(4) * h.z)
        })
        .collect();
    // Vertex index bits: 1 = +x, 2 = +y, 4 = +z.
    let triangles = vec![
        [0, 2, 3], [0, 3, 1], // -z
        [4, 5, 7], [4, 7, 6], // +z
        [0, 1, 5], [0, 5, 4], // -y
        [2, 6, 7], [2, 7, 3], // +y
        [0, 4, 6], [0, 6, 2], // -x
        [1, 3, 7], [1, 7, 5], // +x
    ];
    TriMesh {
        vertices,
        triangles,
    }
}

/// Closed cylinder along `axis` (unit or not), centered at `center`.
pub fn cylinder_mesh(
    radius: f64,
    length: f64,
    axis: Vector3<f64>,
    center: Point3,
    segments: usize,
) -> TriMesh {
    let segments = segments.max(3);
    let h = 0.5 * length;
    let mut vertices = Vec::with_capacity(2 * segments + 2);
    for i in 0..segments {
        let a = std::f64::consts::TAU * i as f64 / segments as f64;
        let (s, c) = a.sin_cos();
        vertices.push(Point3::new(radius * c, radius * s, -h));
        vertices.push(Point3::new(radius * c, radius * s, h));
    }
    let bottom = vertices.len() as u32;
    vertices.push(Point3::new(0.0, 0.0, -h));
    vertices.push(Point3::new(0.0, 0.0, h));
    let top = bottom + 1;
    let mut triangles = Vec::with_capacity(4 * segments);
    for i in 0..segments as u32 {
        let j = (i + 1) % segments as u32;
        let (b0, t0, b1, t1) = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1);
        triangles.push([b0, b1, t1]);
        triangles.push([b0, t1, t0]);
        triangles.push([bottom, b1, b0]);
        triangles.push([top, t0, t1]);
    }
    let rot = rotation_from_z(&axis);
    TriMesh {
        vertices,
        triangles,
    }
    .transformed(&RigidTransform::new(rot, center))
}

fn rotation_from_z(axis: &Vector3<f64>) -> UnitQuaternion {
    let a = axis.normalize();
    let z = Vector3::z();
    let c = z.dot(&a);
    if c < -1.0 + 1e-12 {
        return UnitQuaternion::from_axis_angle(&Vector3::x(), std::f64::consts::PI);
    }
    let cross = z.cross(&a);
    UnitQuaternion::from_axis_angle(&cross, cross.norm().atan2(c))
}
