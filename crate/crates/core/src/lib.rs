//! Registration engine for fitting rigid and single-revolute-joint object
//! models to point-cloud scenes at operator-selected points, with operator
//! corrections and refitting.
//!
//! Module map:
//! - [`geom`]: quaternions, rigid transforms, twists, rotation error.
//! - [`cloud`]: PCD loading, voxel grid, sphere culling, k-d tree.
//! - [`model`]: STL meshes, model descriptions, surface sampling, FK.
//! - [`fit`]: weighted ICP, random restarts, hybrid articulated fitting.
//! - [`engine`]: the session state machine driven by the operator.
//! - [`eval`]: ground-truth metrics, synthetic scenes, batch evaluation.

pub mod cloud;
pub mod engine;
pub mod eval;
pub mod exec;
pub mod fit;
pub mod geom;
pub mod model;

pub use geom::{Point3, RigidTransform, Twist6, UnitQuaternion};
