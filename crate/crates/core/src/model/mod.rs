//! Candidate object models: meshes, the single revolute joint of articulated
//! models, surface sampling and forward kinematics.

mod description;
pub mod primitives;
mod sampling;
mod stl;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{rotate_point, Point3, RigidTransform, UnitQuaternion};

pub use description::{load_model_description, parse_model_description};
pub use sampling::sample_surface;
pub use stl::{load_stl, read_stl, write_stl, StlEncoding};

/// Default number of surface samples per model.
pub const DEFAULT_SAMPLE_COUNT: usize = 400;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed STL: {0}")]
    MalformedStl(String),
    #[error("I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("mesh file not found: {0}")]
    MissingMesh(std::path::PathBuf),
    #[error("invalid joint: {0}")]
    InvalidJoint(String),
    #[error("invalid model description: {0}")]
    ParseFailure(String),
    #[error("mesh has no surface area")]
    EmptyMesh,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Result<Self, ModelError> {
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(ModelError::InvalidMesh(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(ModelError::InvalidMesh("non-finite vertex".into()));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, tri: usize) -> [Point3; 3] {
        self.triangles[tri].map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, tri: usize) -> f64 {
        let [a, b, c] = self.corners(tri);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn transformed(&self, pose: &RigidTransform) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| pose.apply(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Concatenates two meshes into one vertex/triangle list.
    pub fn merged(&self, other: &TriMesh) -> TriMesh {
        let off = self.vertices.len() as u32;
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut triangles = self.triangles.clone();
        triangles.extend(other.triangles.iter().map(|t| t.map(|i| i + off)));
        TriMesh {
            vertices,
            triangles,
        }
    }
}

/// One-DOF revolute joint in the model frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevoluteJoint {
    origin: Point3,
    axis: Vector3<f64>,
    theta_min: f64,
    theta_max: f64,
}

impl RevoluteJoint {
    /// `axis` must already be unit length (within 1e-9); it is not silently
    /// normalized.
    pub fn new(
        origin: Point3,
        axis: Vector3<f64>,
        theta_min: f64,
        theta_max: f64,
    ) -> Result<Self, ModelError> {
        if !origin.iter().chain(axis.iter()).all(|c| c.is_finite()) {
            return Err(ModelError::InvalidJoint("non-finite origin or axis".into()));
        }
        if (axis.norm() - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidJoint(format!(
                "axis {:?} is not unit length",
                axis.as_slice()
            )));
        }
        if !(theta_min.is_finite() && theta_max.is_finite()) || theta_min > theta_max {
            return Err(ModelError::InvalidJoint(format!(
                "limits [{theta_min}, {theta_max}] are not ordered"
            )));
        }
        Ok(Self {
            origin,
            axis: axis / axis.norm(),
            theta_min,
            theta_max,
        })
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }
    pub fn axis(&self) -> Vector3<f64> {
        self.axis
    }
    pub fn theta_min(&self) -> f64 {
        self.theta_min
    }
    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    pub fn clamp(&self, theta: f64) -> f64 {
        theta.clamp(self.theta_min, self.theta_max)
    }

    pub fn contains(&self, theta: f64) -> bool {
        (self.theta_min..=self.theta_max).contains(&theta)
    }

    /// Motion of the moving link relative to the base at angle `theta`.
    pub fn link_transform(&self, theta: f64) -> RigidTransform {
        let rot = UnitQuaternion::from_axis_angle(&self.axis, theta);
        RigidTransform::new(rot, self.origin - rotate_point(&rot, &self.origin))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelKind {
    Static {
        mesh: TriMesh,
    },
    Articulated {
        base: TriMesh,
        moving: TriMesh,
        joint: RevoluteJoint,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    pub name: String,
    pub kind: ModelKind,
    pub sample_count: usize,
    /// Model-frame transforms under which the object looks the same. Used
    /// only for evaluation.
    pub symmetries: Vec<RigidTransform>,
}

impl ObjectModel {
    pub fn new_static(name: impl Into<String>, mesh: TriMesh) -> Self {
        Self {
            name: name.into(),
            kind: ModelKind::Static { mesh },
            sample_count: DEFAULT_SAMPLE_COUNT,
            symmetries: Vec::new(),
        }
    }

    pub fn new_articulated(
        name: impl Into<String>,
        base: TriMesh,
        moving: TriMesh,
        joint: RevoluteJoint,
    ) -> Result<Self, ModelError> {
        if base.is_empty() || moving.is_empty() {
            return Err(ModelError::InvalidMesh(
                "articulated models need two non-empty link meshes".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            kind: ModelKind::Articulated {
                base,
                moving,
                joint,
            },
            sample_count: DEFAULT_SAMPLE_COUNT,
            symmetries: Vec::new(),
        })
    }

    pub fn with_symmetries(mut self, symmetries: Vec<RigidTransform>) -> Self {
        self.symmetries = symmetries;
        self
    }

    pub fn with_sample_count(mut self, n: usize) -> Self {
        self.sample_count = n;
        self
    }

    pub fn joint(&self) -> Option<&RevoluteJoint> {
        match &self.kind {
            ModelKind::Static { .. } => None,
            ModelKind::Articulated { joint, .. } => Some(joint),
        }
    }

    pub fn is_articulated(&self) -> bool {
        self.joint().is_some()
    }

    /// All geometry at `theta`, as a single mesh in the model frame.
    pub fn mesh_at(&self, theta: f64) -> TriMesh {
        match &self.kind {
            ModelKind::Static { mesh } => mesh.clone(),
            ModelKind::Articulated {
                base,
                moving,
                joint,
            } => base.merged(&moving.transformed(&joint.link_transform(joint.clamp(theta)))),
        }
    }
}

/// Diagonal of the model's axis-aligned bounding box at θ = 0, over both
/// links. Upper-bounds the true diameter.
pub fn max_width(model: &ObjectModel) -> f64 {
    let verts: Box<dyn Iterator<Item = &Point3>> = match &model.kind {
        ModelKind::Static { mesh } => Box::new(mesh.vertices.iter()),
        ModelKind::Articulated { base, moving, .. } => {
            Box::new(base.vertices.iter().chain(moving.vertices.iter()))
        }
    };
    let mut lo = Point3::repeat(f64::INFINITY);
    let mut hi = Point3::repeat(f64::NEG_INFINITY);
    for v in verts {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    if lo.x > hi.x {
        return 0.0;
    }
    (hi - lo).norm()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    Base,
    Moving,
}

/// Forward kinematics of one sampled point: joint rotation for the moving
/// link, then the object pose.
#[inline]
pub fn fk(
    p: &Point3,
    link: Link,
    q: &UnitQuaternion,
    t: &Point3,
    theta: f64,
    joint: &RevoluteJoint,
) -> Point3 {
    let local = match link {
        Link::Base => *p,
        Link::Moving => {
            let rot = UnitQuaternion::from_axis_angle(&joint.axis, theta);
            rotate_point(&rot, &(p - joint.origin)) + joint.origin
        }
    };
    rotate_point(q, &local) + t
}

/// Surface samples of a model, split per link.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledModel {
    pub base_points: Vec<Point3>,
    /// Empty for static models.
    pub moving_points: Vec<Point3>,
    pub max_width: f64,
    pub joint: Option<RevoluteJoint>,
}

impl SampledModel {
    pub fn len(&self) -> usize {
        self.base_points.len() + self.moving_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All samples in the model frame with the moving link at `theta`.
    pub fn local_points(&self, theta: f64) -> Vec<Point3> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.base_points);
        match &self.joint {
            Some(joint) if !self.moving_points.is_empty() => {
                let link = joint.link_transform(theta);
                out.extend(self.moving_points.iter().map(|p| link.apply(p)));
            }
            _ => out.extend_from_slice(&self.moving_points),
        }
        out
    }
}

/// Samples `model.sample_count` surface points, split between links in
/// proportion to their area.
pub fn sample_model(model: &ObjectModel, seed: u64) -> Result<SampledModel, ModelError> {
    let width = max_width(model);
    match &model.kind {
        ModelKind::Static { mesh } => Ok(SampledModel {
            base_points: sample_surface(mesh, model.sample_count, seed)?,
            moving_points: Vec::new(),
            max_width: width,
            joint: None,
        }),
        ModelKind::Articulated {
            base,
            moving,
            joint,
        } => {
            let (ab, am) = (base.surface_area(), moving.surface_area());
            if ab <= 0.0 || am <= 0.0 {
                return Err(ModelError::EmptyMesh);
            }
            let n = model.sample_count;
            let n_base = ((n as f64 * ab / (ab + am)).round() as usize).clamp(1, n.saturating_sub(1));
            Ok(SampledModel {
                base_points: sample_surface(base, n_base, seed)?,
                moving_points: sample_surface(moving, n - n_base, seed ^ 0x9E37_79B9_7F4A_7C15)?,
                max_width: width,
                joint: Some(*joint),
            })
        }
    }
}

/// Applies [`fk`] to every sampled point: base link first, then moving link.
pub fn posed_points(sm: &SampledModel, pose: &RigidTransform, theta: f64) -> Vec<Point3> {
    let mut out = Vec::with_capacity(sm.len());
    posed_points_into(sm, pose, theta, &mut out);
    out
}

pub(crate) fn posed_points_into(
    sm: &SampledModel,
    pose: &RigidTransform,
    theta: f64,
    out: &mut Vec<Point3>,
) {
    out.clear();
    out.extend(sm.base_points.iter().map(|p| pose.apply(p)));
    if sm.moving_points.is_empty() {
        return;
    }
    let chain = match &sm.joint {
        Some(joint) => pose.compose(&joint.link_transform(theta)),
        None => *pose,
    };
    out.extend(sm.moving_points.iter().map(|p| chain.apply(p)));
}

#[cfg(test)]
mod tests {
    use super::primitives::box_mesh;
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Rotation3, Unit};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn joint() -> RevoluteJoint {
        RevoluteJoint::new(Point3::new(0.1, 0.0, 0.05), Vector3::z(), 0.0, FRAC_PI_2).unwrap()
    }

    fn two_link() -> ObjectModel {
        let base = box_mesh(Vector3::new(0.05, 0.05, 0.025), Point3::new(0.05, 0.05, 0.025));
        let moving = box_mesh(Vector3::new(0.05, 0.02, 0.01), Point3::new(0.15, 0.05, 0.04));
        ObjectModel::new_articulated("valve", base, moving, joint()).unwrap()
    }

    // Homogeneous-matrix chain built independently with nalgebra.
    fn homogeneous(q: &UnitQuaternion, t: &Point3) -> Matrix4<f64> {
        let nq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q.w(),
            q.x(),
            q.y(),
            q.z(),
        ));
        let mut m = nq.to_homogeneous();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
        m
    }

    fn fk_oracle(p: &Point3, link: Link, q: &UnitQuaternion, t: &Point3, theta: f64, j: &RevoluteJoint) -> Point3 {
        let pose = homogeneous(q, t);
        let m = match link {
            Link::Base => pose,
            Link::Moving => {
                let rot = Rotation3::from_axis_angle(&Unit::new_normalize(j.axis()), theta).to_homogeneous();
                let to = Matrix4::new_translation(&j.origin());
                let from = Matrix4::new_translation(&-j.origin());
                pose * to * rot * from
            }
        };
        (m * p.push(1.0)).xyz()
    }

    #[test]
    fn joint_validation() {
        assert!(matches!(
            RevoluteJoint::new(Point3::zeros(), Vector3::new(0.0, 0.0, 2.0), 0.0, 1.0),
            Err(ModelError::InvalidJoint(_))
        ));
        assert!(matches!(
            RevoluteJoint::new(Point3::zeros(), Vector3::z(), 1.0, 0.0),
            Err(ModelError::InvalidJoint(_))
        ));
    }

    #[test]
    fn articulated_requires_both_links() {
        let b = box_mesh(Vector3::repeat(0.1), Point3::zeros());
        assert!(ObjectModel::new_articulated("x", b, TriMesh::default(), joint()).is_err());
    }

    #[test]
    fn max_width_unit_cube() {
        let m = ObjectModel::new_static("cube", box_mesh(Vector3::repeat(0.5), Point3::repeat(0.5)));
        assert_relative_eq!(max_width(&m), 3f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn max_width_two_links() {
        // Links span [0,0,0]–[0.2,0.1,0.05].
        assert_relative_eq!(
            max_width(&two_link()),
            Vector3::new(0.2, 0.1, 0.05).norm(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn max_width_bounds_pairwise_diameter() {
        let model = two_link();
        let mesh = model.mesh_at(0.0);
        let mut diameter: f64 = 0.0;
        for a in &mesh.vertices {
            for b in &mesh.vertices {
                diameter = diameter.max((a - b).norm());
            }
        }
        let w = max_width(&model);
        assert!(w >= diameter - 1e-12);
        assert!(w <= diameter * 1.15);
    }

    #[test]
    fn fk_identity_at_zero() {
        let j = joint();
        let p = Point3::new(0.3, -0.2, 0.1);
        for link in [Link::Base, Link::Moving] {
            assert_eq!(fk(&p, link, &UnitQuaternion::IDENTITY, &Point3::zeros(), 0.0, &j), p);
        }
    }

    #[test]
    fn fk_quarter_turn_about_joint() {
        let j = joint();
        let r = 0.07;
        let p = j.origin() + Vector3::x() * r;
        let out = fk(&p, Link::Moving, &UnitQuaternion::IDENTITY, &Point3::zeros(), FRAC_PI_2, &j);
        assert_relative_eq!(out, j.origin() + Vector3::y() * r, epsilon = 1e-15);
    }

    #[test]
    fn posed_points_identity_and_translation() {
        let sm = sample_model(&two_link(), 1).unwrap();
        let pts = posed_points(&sm, &RigidTransform::IDENTITY, 0.0);
        let mut expected = sm.base_points.clone();
        expected.extend_from_slice(&sm.moving_points);
        assert_eq!(pts, expected);

        let shift = Point3::new(0.5, -1.0, 2.0);
        let moved = posed_points(&sm, &RigidTransform::from_translation(shift), 0.0);
        for (a, b) in moved.iter().zip(&expected) {
            assert_relative_eq!(a - b, shift, epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_budget_is_split_by_area() {
        let model = two_link().with_sample_count(400);
        let sm = sample_model(&model, 3).unwrap();
        assert_eq!(sm.len(), 400);
        let ModelKind::Articulated { base, moving, .. } = &model.kind else { unreachable!() };
        let frac = base.surface_area() / (base.surface_area() + moving.surface_area());
        assert!((sm.base_points.len() as f64 - 400.0 * frac).abs() <= 1.0);
    }

    fn arb_quat() -> impl Strategy<Value = UnitQuaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter_map("zero", |(w, x, y, z)| UnitQuaternion::new_normalize(w, x, y, z))
    }

    proptest! {
        #[test]
        fn fk_matches_homogeneous_chain(
            q in arb_quat(), tx in -1.0..1.0f64, ty in -1.0..1.0f64, tz in -1.0..1.0f64,
            theta in 0.0..FRAC_PI_2, px in -0.3..0.3f64, py in -0.3..0.3f64, pz in -0.3..0.3f64,
        ) {
            let j = joint();
            let t = Point3::new(tx, ty, tz);
            let p = Point3::new(px, py, pz);
            for link in [Link::Base, Link::Moving] {
                let a = fk(&p, link, &q, &t, theta, &j);
                let b = fk_oracle(&p, link, &q, &t, theta, &j);
                prop_assert!((a - b).norm() < 1e-12);
            }
        }

        #[test]
        fn fk_is_rigid_per_link(q in arb_quat(), theta in 0.0..FRAC_PI_2, seed in 0u64..1000) {
            let sm = sample_model(&two_link().with_sample_count(40), seed).unwrap();
            let j = sm.joint.unwrap();
            let t = Point3::new(0.3, 0.1, -0.2);
            for (pts, link) in [(&sm.base_points, Link::Base), (&sm.moving_points, Link::Moving)] {
                let posed: Vec<_> = pts.iter().map(|p| fk(p, link, &q, &t, theta, &j)).collect();
                for i in 0..pts.len() {
                    for k in (i + 1)..pts.len() {
                        let d0 = (pts[i] - pts[k]).norm();
                        let d1 = (posed[i] - posed[k]).norm();
                        prop_assert!((d0 - d1).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn posed_points_match_elementwise_fk(q in arb_quat(), theta in 0.0..FRAC_PI_2) {
            let sm = sample_model(&two_link().with_sample_count(60), 7).unwrap();
            let j = sm.joint.unwrap();
            let t = Point3::new(-0.1, 0.4, 0.2);
            let pose = RigidTransform::new(q, t);
            let posed = posed_points(&sm, &pose, theta);
            prop_assert_eq!(posed.len(), sm.len());
            let expected = sm.base_points.iter().map(|p| fk(p, Link::Base, &q, &t, theta, &j))
                .chain(sm.moving_points.iter().map(|p| fk(p, Link::Moving, &q, &t, theta, &j)));
            for (a, b) in posed.iter().zip(expected) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }
    }
}
