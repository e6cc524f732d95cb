//! JSON bodies exchanged with clients. Units are meters and radians;
//! quaternions are `[w, x, y, z]`.

use artireg::engine::{ObjectOfInterest, PointAction, RegistrationReport, Session};
use artireg::fit::FitResult;
use artireg::geom::{Point3, RigidTransform, UnitQuaternion};
use serde::{Deserialize, Serialize};

/// Pose plus joint angle, 0 for static models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseJson {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
    #[serde(default)]
    pub theta: f64,
}

impl PoseJson {
    pub fn new(pose: &RigidTransform, theta: f64) -> Self {
        let t = pose.translation;
        Self {
            position: [t.x, t.y, t.z],
            orientation: pose.rotation.to_array(),
            theta,
        }
    }

    pub fn from_fit(r: &FitResult) -> Self {
        Self::new(&r.pose, r.theta)
    }

    /// The orientation is normalized; `None` if it is zero or not finite.
    pub fn to_transform(&self) -> Option<RigidTransform> {
        let [w, x, y, z] = self.orientation;
        let q = UnitQuaternion::new_normalize(w, x, y, z)?;
        let [px, py, pz] = self.position;
        let pose = RigidTransform::new(q, Point3::new(px, py, pz));
        pose.is_finite().then_some(pose)
    }
}

/// Non-finite values (a fit with no inliers) are sent as `null`.
fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub model: String,
    pub likelihood: Option<f64>,
    pub residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub id: u64,
    pub active_model: String,
    pub pose: PoseJson,
    pub likelihood: Option<f64>,
    pub residual: Option<f64>,
    /// Candidate models, most likely first.
    pub models: Vec<RankedModel>,
    pub active_index: usize,
    /// A correction is waiting for its refit.
    pub pending: bool,
}

impl ObjectSummary {
    pub fn new(o: &ObjectOfInterest) -> Self {
        let a = o.active();
        Self {
            id: o.id,
            active_model: a.model.clone(),
            pose: PoseJson::from_fit(&a.result),
            likelihood: finite(a.result.likelihood),
            residual: finite(a.result.residual),
            models: ranked(o),
            active_index: o.active_index,
            pending: o.pending.is_some(),
        }
    }
}

fn ranked(o: &ObjectOfInterest) -> Vec<RankedModel> {
    o.fits
        .iter()
        .map(|f| RankedModel {
            model: f.model.clone(),
            likelihood: finite(f.result.likelihood),
            residual: finite(f.result.residual),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub session: u64,
    pub revision: u64,
    pub models: Vec<String>,
    pub objects: Vec<ObjectSummary>,
    pub active_object: Option<u64>,
    pub refit_enabled: bool,
    pub camera_pose: CameraJson,
}

impl StateSnapshot {
    pub fn new(id: u64, s: &Session) -> Self {
        let cam = PoseJson::new(&s.camera_pose(), 0.0);
        Self {
            session: id,
            revision: s.revision(),
            models: s.model_names(),
            objects: s.objects().iter().map(ObjectSummary::new).collect(),
            active_object: s.active_object(),
            refit_enabled: s.refit_enabled(),
            camera_pose: CameraJson {
                position: cam.position,
                orientation: cam.orientation,
            },
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRequest {
    pub point: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointResponse {
    pub revision: u64,
    pub object: u64,
    pub action: PointAction,
    pub active_model: String,
    pub models: Vec<RankedModel>,
}

impl PointResponse {
    pub fn new(revision: u64, action: PointAction, o: &ObjectOfInterest) -> Self {
        Self {
            revision,
            object: o.id,
            action,
            active_model: o.active().model.clone(),
            models: ranked(o),
        }
    }
}

/// One sample of operator input. Twist components lie in `[-1, 1]` and are
/// expressed in camera axes; `dt` is how long the sample was held.
/// `timestamp` is the client's clock in seconds and only orders samples:
/// one not newer than the last accepted sample for the object is rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionRequest {
    #[serde(default)]
    pub linear: [f64; 3],
    #[serde(default)]
    pub angular: [f64; 3],
    #[serde(default)]
    pub delta_theta: f64,
    pub dt: f64,
    pub timestamp: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseResponse {
    pub revision: u64,
    pub object: u64,
    pub model: String,
    pub pose: PoseJson,
    pub residual: Option<f64>,
    pub likelihood: Option<f64>,
}

impl PoseResponse {
    pub fn new(revision: u64, object: u64, model: String, r: &FitResult) -> Self {
        Self {
            revision,
            object,
            model,
            pose: PoseJson::from_fit(r),
            residual: finite(r.residual),
            likelihood: finite(r.likelihood),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CycleResponse {
    pub revision: u64,
    pub object: u64,
    pub active_model: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RevisionResponse {
    pub revision: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefitToggle {
    pub enabled: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExportResponse {
    pub revision: u64,
    #[serde(flatten)]
    pub report: RegistrationReport,
}

/// Optional optimistic-concurrency guard on any mutation.
#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionGuard {
    pub expected_revision: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}
