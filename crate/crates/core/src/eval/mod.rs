//! Ground-truth metrics, synthetic scenes and batch evaluation.

mod batch;
pub mod library;
mod scene;

pub use batch::{
    run_batch, AggregateRow, BatchConfig, BatchReport, ModelSource, ObjectSpec, SweepSpec,
    TrialRow,
};
pub use scene::{generate_scene, GeneratedScene, SceneObject};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::FitResult;
use crate::geom::{rotation_error, Point3, RigidTransform};
use crate::model::{posed_points, SampledModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("fit is for model {fit}, ground truth is {truth}")]
    ModelMismatch { truth: String, fit: String },
    #[error("config: {0}")]
    Config(String),
    #[error("scene generation: {0}")]
    Scene(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub model: String,
    pub pose: RigidTransform,
    pub theta: f64,
    /// Model-frame transforms giving an identical appearance. Always holds
    /// the identity first.
    pub symmetry_poses: Vec<RigidTransform>,
}

impl GroundTruthObject {
    /// Adds the identity in front of `symmetries`.
    pub fn new(model: impl Into<String>, pose: RigidTransform, theta: f64, symmetries: &[RigidTransform]) -> Self {
        let mut symmetry_poses = vec![RigidTransform::IDENTITY];
        symmetry_poses.extend(symmetries.iter().copied());
        Self {
            model: model.into(),
            pose,
            theta,
            symmetry_poses,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitErrors {
    pub position_error: f64,
    pub rotation_error: f64,
    pub articulation_error: f64,
    pub mean_pointwise_error: f64,
}

/// Errors of `fit` (for model `fit_model`) against `gt`.
///
/// Rotation and point-wise errors take the minimum over the symmetry poses.
/// Point-wise error averages over the fitting samples `sm` of that model.
pub fn fit_errors(
    gt: &GroundTruthObject,
    fit_model: &str,
    fit: &FitResult,
    sm: &SampledModel,
) -> Result<FitErrors, EvalError> {
    if gt.model != fit_model {
        return Err(EvalError::ModelMismatch {
            truth: gt.model.clone(),
            fit: fit_model.to_string(),
        });
    }
    let registered = posed_points(sm, &fit.pose, fit.theta);
    let mut rot = f64::INFINITY;
    let mut pointwise = f64::INFINITY;
    for sym in &gt.symmetry_poses {
        let pose = gt.pose.compose(sym);
        rot = rot.min(rotation_error(&pose.rotation, &fit.pose.rotation));
        let truth = posed_points(sm, &pose, gt.theta);
        let mean = if truth.is_empty() {
            0.0
        } else {
            truth.iter().zip(&registered).map(|(a, b)| (a - b).norm()).sum::<f64>() / truth.len() as f64
        };
        pointwise = pointwise.min(mean);
    }
    Ok(FitErrors {
        position_error: (gt.pose.translation - fit.pose.translation).norm(),
        rotation_error: rot,
        articulation_error: (gt.theta - fit.theta).abs(),
        mean_pointwise_error: pointwise,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// `(truth index, fit index)`, in the order they were paired.
    pub pairs: Vec<(usize, usize)>,
    pub missed: Vec<usize>,
    pub false_positives: Vec<usize>,
}

/// Greedy closest-first pairing of positions. Equal distances resolve by
/// truth index, then fit index.
pub fn match_objects(truths: &[Point3], fits: &[Point3]) -> Matching {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(truths.len() * fits.len());
    for (i, t) in truths.iter().enumerate() {
        for (j, f) in fits.iter().enumerate() {
            candidates.push(((t - f).norm(), i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_t = vec![false; truths.len()];
    let mut used_f = vec![false; fits.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_t[i] && !used_f[j] {
            used_t[i] = true;
            used_f[j] = true;
            pairs.push((i, j));
        }
    }
    Matching {
        pairs,
        missed: (0..truths.len()).filter(|&i| !used_t[i]).collect(),
        false_positives: (0..fits.len()).filter(|&j| !used_f[j]).collect(),
    }
}
