//! Quaternion and rigid-transform algebra shared by the whole crate.
//!
//! Quaternions are Hamilton, scalar-first and right-handed. Every operation
//! that produces a new rotation renormalizes it, so long chains of operator
//! corrections do not drift off the unit sphere.

use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// A point or free vector in meters.
pub type Point3 = Vector3<f64>;

/// Rotation stored as a unit quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(w, x, y, z)`. Returns `None` for non-finite or
    /// (numerically) zero input.
    pub fn new_normalize(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm < 1e-300 {
            return None;
        }
        Some(Self {
            w: w / norm,
            x: x / norm,
            y: y / norm,
            z: z / norm,
        })
    }

    /// Rotation of `angle` radians about `axis`. A zero axis gives the identity.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let k = s / n;
        Self::new_normalize(c, axis.x * k, axis.y * k, axis.z * k).unwrap_or(Self::IDENTITY)
    }

    /// Exponential map: rotation by `|v|` radians about `v`.
    pub fn from_scaled_axis(v: &Vector3<f64>) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    #[inline]
    pub fn w(&self) -> f64 {
        self.w
    }
    #[inline]
    pub fn x(&self) -> f64 {
        self.x
    }
    #[inline]
    pub fn y(&self) -> f64 {
        self.y
    }
    #[inline]
    pub fn z(&self) -> f64 {
        self.z
    }

    /// `[w, x, y, z]`
    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector_part(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Conjugate, which is the inverse for unit quaternions.
    pub fn inverse(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// The other quaternion representing the same rotation.
    pub fn negated(&self) -> Self {
        Self {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vector_part().norm().atan2(self.w.abs())
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Matrix3::new(
            1.0 - 2.0 * (yy + zz),
            2.0 * (xy - wz),
            2.0 * (xz + wy),
            2.0 * (xy + wz),
            1.0 - 2.0 * (xx + zz),
            2.0 * (yz - wx),
            2.0 * (xz - wy),
            2.0 * (yz + wx),
            1.0 - 2.0 * (xx + yy),
        )
    }

    /// Converts a proper rotation matrix (Shepperd's method). The returned
    /// quaternion has `w >= 0`.
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z) = if trace > 0.0 {
            let s = 2.0 * (trace + 1.0).sqrt();
            (
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            (
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            (
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            (
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let q = Self::new_normalize(w, x, y, z).unwrap_or(Self::IDENTITY);
        if q.w < 0.0 {
            q.negated()
        } else {
            q
        }
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        q.to_array()
    }
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = String;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new_normalize(v[0], v[1], v[2], v[3])
            .ok_or_else(|| format!("invalid quaternion {v:?}"))
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, rhs: UnitQuaternion) -> UnitQuaternion {
        quat_multiply(&self, &rhs)
    }
}

/// Hamilton product `a ⋆ b`, renormalized.
pub fn quat_multiply(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
    let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
    let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
    let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
    UnitQuaternion::new_normalize(w, x, y, z).unwrap_or(UnitQuaternion::IDENTITY)
}

/// Rotates `p` by `q`.
#[inline]
pub fn rotate_point(q: &UnitQuaternion, p: &Point3) -> Point3 {
    let v = Vector3::new(q.x, q.y, q.z);
    let t = 2.0 * v.cross(p);
    p + q.w * t + v.cross(&t)
}

/// Angle of the relative rotation `q_gt⁻¹ ⋆ q_reg`, i.e.
/// `2·acos(|Re(q_gt⁻¹ ⋆ q_reg)|)`.
///
/// Evaluated as `2·atan2(|Im|, |Re|)`, which equals the arccos form for unit
/// quaternions but keeps full precision for nearly identical rotations.
pub fn rotation_error(q_gt: &UnitQuaternion, q_reg: &UnitQuaternion) -> f64 {
    // Relative rotation conj(a)·b, unnormalized; atan2 is scale free and
    // this form cancels exactly when b = ±a.
    let (a, b) = (q_gt, q_reg);
    let (av, bv) = (a.vector_part(), b.vector_part());
    let w = a.w * b.w + av.dot(&bv);
    let v = a.w * bv - b.w * av - av.cross(&bv);
    2.0 * v.norm().atan2(w.abs())
}

/// Rotation followed by translation: `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion,
    pub translation: Point3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: UnitQuaternion::IDENTITY,
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(rotation: UnitQuaternion, translation: Point3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Point3) -> Self {
        Self::new(UnitQuaternion::IDENTITY, translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion) -> Self {
        Self::new(rotation, Point3::zeros())
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        rotate_point(&self.rotation, p) + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rotation = self.rotation.inverse();
        RigidTransform {
            rotation,
            translation: -rotate_point(&rotation, &self.translation),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|c| c.is_finite())
            && self.rotation.to_array().iter().all(|c| c.is_finite())
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// Relative 6-DOF motion: linear part in meters, angular part as a scaled
/// rotation axis in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist6 {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist6 {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.linear == Vector3::zeros() && self.angular == Vector3::zeros()
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|c| c.is_finite())
    }

    pub fn scaled(&self, linear: f64, angular: f64) -> Self {
        Self {
            linear: self.linear * linear,
            angular: self.angular * angular,
        }
    }
}

/// Applies an operator twist expressed in the axes of `frame` (the camera pose
/// in scene coordinates). The rotation pivots about the object's own origin.
pub fn apply_twist(pose: &RigidTransform, twist: &Twist6, frame: &RigidTransform) -> RigidTransform {
    if twist.is_zero() {
        return *pose;
    }
    let linear = rotate_point(&frame.rotation, &twist.linear);
    let angular = rotate_point(&frame.rotation, &twist.angular);
    RigidTransform {
        rotation: UnitQuaternion::from_scaled_axis(&angular) * pose.rotation,
        translation: pose.translation + linear,
    }
}
