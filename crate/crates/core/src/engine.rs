//! Operator session state machine.
//!
//! A [`Session`] owns a voxelized scene, the candidate models and the list of
//! objects of interest. Every mutation bumps [`Session::revision`]. Time is
//! supplied by the caller as a [`Duration`] on any monotonic clock, which
//! keeps the debounce logic deterministic under test.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{cull_sphere, voxel_downsample, PointCloud, SpatialIndex};
use crate::exec;
use crate::fit::{self, derive_seed, FitError, FitParams, FitResult};
use crate::geom::{apply_twist, Point3, RigidTransform, Twist6};
use crate::model::{sample_model, ObjectModel, SampledModel};

/// Seed stream for model surface sampling, disjoint from fitting streams.
const SAMPLING_STREAM: u64 = 1 << 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("scene has no points")]
    EmptyScene,
    #[error("no candidate models")]
    NoModels,
    #[error("unknown object {0}")]
    UnknownObject(u64),
    #[error("no scene points within reach of the seed point")]
    NoScenePointsNearSeed,
    #[error("articulation input for a static model")]
    StaticArticulationInput,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("model {name}: {reason}")]
    Model { name: String, reason: String },
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineParams {
    /// Voxel grid leaf for the scene (m).
    pub voxel_leaf: f64,
    /// Quiet period after the last correction before a refit (s).
    pub debounce_seconds: f64,
    /// Exponential input scaling constant.
    pub input_scaling: f64,
    /// Translation speed at full deflection (m/s).
    pub linear_rate: f64,
    /// Rotation speed at full deflection (rad/s).
    pub angular_rate: f64,
    /// A click this close to an existing search point, as a fraction of the
    /// smallest model width, targets that object.
    pub activation_radius_fraction: f64,
    pub fit: FitParams,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            voxel_leaf: 0.005,
            debounce_seconds: 0.5,
            input_scaling: 3.0,
            linear_rate: 0.1,
            angular_rate: 0.5,
            activation_radius_fraction: 0.25,
            fit: FitParams::default(),
        }
    }
}

impl EngineParams {
    pub fn validate(&self) -> Result<(), EngineError> {
        for (name, v) in [
            ("voxel_leaf", self.voxel_leaf),
            ("input_scaling", self.input_scaling),
            ("linear_rate", self.linear_rate),
            ("angular_rate", self.angular_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EngineError::InvalidInput(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("debounce_seconds", self.debounce_seconds),
            ("activation_radius_fraction", self.activation_radius_fraction),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EngineError::InvalidInput(format!("{name} must be non-negative")));
            }
        }
        self.fit.validate()?;
        Ok(())
    }

    pub fn debounce(&self) -> Duration {
        Duration::from_secs_f64(self.debounce_seconds)
    }
}

/// One candidate model's fit for an object.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelFit {
    /// Position in the session's model list.
    pub model_index: usize,
    pub model: String,
    pub result: FitResult,
}

/// Accumulated operator input since the last refit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PendingCorrection {
    /// Sum of applied (scaled) twists, in camera axes.
    pub twist: Twist6,
    pub delta_theta: f64,
    #[serde(skip)]
    pub last_input: Duration,
}

#[derive(Clone, Debug)]
pub struct ObjectOfInterest {
    pub id: u64,
    pub search_point: Point3,
    /// Ordered by likelihood, highest first; ties keep model order.
    pub fits: Vec<ModelFit>,
    pub active_index: usize,
    pub pending: Option<PendingCorrection>,
    /// Per-model scene crop around the search point, reused by refits.
    crops: Vec<Arc<SpatialIndex>>,
}

impl ObjectOfInterest {
    pub fn active(&self) -> &ModelFit {
        &self.fits[self.active_index]
    }
}

/// What a click did.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointAction {
    Created,
    Activated,
    Cycled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportedObject {
    pub id: u64,
    pub model: String,
    pub position: [f64; 3],
    /// `[w, x, y, z]`
    pub orientation: [f64; 4],
    pub theta: f64,
    pub residual: f64,
    pub likelihood: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub objects: Vec<ExportedObject>,
}

struct ModelEntry {
    model: ObjectModel,
    sampled: SampledModel,
}

pub struct Session {
    scene: PointCloud,
    models: Vec<ModelEntry>,
    objects: Vec<ObjectOfInterest>,
    active_object: Option<u64>,
    camera_pose: RigidTransform,
    refit_enabled: bool,
    params: EngineParams,
    next_id: u64,
    revision: u64,
}

/// `sign(x)·(e^{k|x|} − 1)/(e^k − 1)` per component.
pub fn scale_input(raw: &Twist6, k: f64) -> Twist6 {
    let f = |x: f64| {
        if x == 0.0 {
            return 0.0;
        }
        x.signum() * (k * x.abs()).exp_m1() / k.exp_m1()
    };
    Twist6::new(raw.linear.map(f), raw.angular.map(f))
}

fn rank(fits: &mut [ModelFit]) {
    fits.sort_by(|a, b| {
        b.result
            .likelihood
            .total_cmp(&a.result.likelihood)
            .then(a.model_index.cmp(&b.model_index))
    });
}

impl Session {
    /// Voxelizes and indexes the scene and samples every model.
    pub fn new(
        scene: &PointCloud,
        models: Vec<ObjectModel>,
        params: EngineParams,
    ) -> Result<Self, EngineError> {
        params.validate()?;
        if models.is_empty() {
            return Err(EngineError::NoModels);
        }
        if scene.is_empty() {
            return Err(EngineError::EmptyScene);
        }
        let scene = voxel_downsample(scene, params.voxel_leaf);
        let seed = params.fit.seed;
        let sampled = exec::map_slice(&models, params.fit.parallel, |i, m| {
            sample_model(m, derive_seed(seed, SAMPLING_STREAM + i as u64))
        });
        let models = models
            .into_iter()
            .zip(sampled)
            .map(|(model, s)| match s {
                Ok(sampled) => Ok(ModelEntry { model, sampled }),
                Err(e) => Err(EngineError::Model {
                    name: model.name.clone(),
                    reason: e.to_string(),
                }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            scene,
            models,
            objects: Vec::new(),
            active_object: None,
            camera_pose: RigidTransform::IDENTITY,
            refit_enabled: true,
            params,
            next_id: 1,
            revision: 0,
        })
    }

    /// The voxelized scene the fitter sees.
    pub fn scene(&self) -> &PointCloud {
        &self.scene
    }

    pub fn params(&self) -> &EngineParams {
        &self.params
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.iter().map(|m| m.model.name.clone()).collect()
    }

    pub fn model(&self, index: usize) -> Option<(&ObjectModel, &SampledModel)> {
        self.models.get(index).map(|m| (&m.model, &m.sampled))
    }

    pub fn objects(&self) -> &[ObjectOfInterest] {
        &self.objects
    }

    pub fn object(&self, id: u64) -> Result<&ObjectOfInterest, EngineError> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .ok_or(EngineError::UnknownObject(id))
    }

    fn object_mut(&mut self, id: u64) -> Result<&mut ObjectOfInterest, EngineError> {
        self.objects
            .iter_mut()
            .find(|o| o.id == id)
            .ok_or(EngineError::UnknownObject(id))
    }

    pub fn active_object(&self) -> Option<u64> {
        self.active_object
    }

    pub fn camera_pose(&self) -> RigidTransform {
        self.camera_pose
    }

    pub fn set_camera_pose(&mut self, pose: RigidTransform) -> Result<(), EngineError> {
        if !pose.is_finite() {
            return Err(EngineError::InvalidInput("camera pose is not finite".into()));
        }
        self.camera_pose = pose;
        self.revision += 1;
        Ok(())
    }

    pub fn refit_enabled(&self) -> bool {
        self.refit_enabled
    }

    pub fn set_refit_enabled(&mut self, flag: bool) {
        self.refit_enabled = flag;
        self.revision += 1;
    }

    /// Increases with every committed mutation.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    fn activation_radius(&self) -> f64 {
        let smallest = self
            .models
            .iter()
            .map(|m| m.sampled.max_width)
            .fold(f64::INFINITY, f64::min);
        smallest * self.params.activation_radius_fraction
    }

    /// Operator click. Near an existing object it activates that object, or
    /// cycles its model when it is already active; otherwise every model is
    /// fit around `p` and a new object is created.
    pub fn add_search_point(&mut self, p: Point3) -> Result<(u64, PointAction), EngineError> {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(EngineError::InvalidInput("search point is not finite".into()));
        }
        let radius = self.activation_radius();
        let hit = self
            .objects
            .iter()
            .map(|o| (o.id, (o.search_point - p).norm()))
            .filter(|(_, d)| *d <= radius)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((id, _)) = hit {
            if self.active_object == Some(id) {
                self.cycle_model(id)?;
                return Ok((id, PointAction::Cycled));
            }
            self.active_object = Some(id);
            self.revision += 1;
            return Ok((id, PointAction::Activated));
        }

        let crops: Vec<Arc<SpatialIndex>> = self
            .models
            .iter()
            .map(|m| Arc::new(SpatialIndex::build(&cull_sphere(&self.scene, &p, m.sampled.max_width))))
            .collect();
        if crops.iter().all(|c| c.is_empty()) {
            return Err(EngineError::NoScenePointsNearSeed);
        }
        let base = &self.params.fit;
        // Models fan out here, so restarts inside each fit stay serial.
        let inner = FitParams {
            parallel: false,
            ..base.clone()
        };
        let results = exec::map_slice(&self.models, base.parallel, |i, m| {
            let params = FitParams {
                seed: derive_seed(base.seed, i as u64),
                ..inner.clone()
            };
            fit_model(m, &crops[i], &p, &params)
        });
        let mut fits = Vec::with_capacity(results.len());
        for (i, r) in results.into_iter().enumerate() {
            fits.push(ModelFit {
                model_index: i,
                model: self.models[i].model.name.clone(),
                result: r?,
            });
        }
        rank(&mut fits);
        let id = self.next_id;
        self.next_id += 1;
        self.objects.push(ObjectOfInterest {
            id,
            search_point: p,
            fits,
            active_index: 0,
            pending: None,
            crops,
        });
        self.active_object = Some(id);
        self.revision += 1;
        Ok((id, PointAction::Created))
    }

    /// Advances to the next model in likelihood order, wrapping around.
    /// Any pending correction belonged to the previous model and is dropped.
    pub fn cycle_model(&mut self, id: u64) -> Result<String, EngineError> {
        let obj = self.object_mut(id)?;
        obj.active_index = (obj.active_index + 1) % obj.fits.len();
        obj.pending = None;
        let name = obj.active().model.clone();
        self.active_object = Some(id);
        self.revision += 1;
        Ok(name)
    }

    /// Nudges the active fit by a normalized twist held for `dt` seconds and
    /// by `delta_theta` radians of articulation.
    pub fn apply_correction(
        &mut self,
        id: u64,
        raw_twist: &Twist6,
        delta_theta: f64,
        dt: f64,
        now: Duration,
    ) -> Result<FitResult, EngineError> {
        if !raw_twist.is_finite()
            || raw_twist.linear.iter().chain(raw_twist.angular.iter()).any(|c| c.abs() > 1.0)
        {
            return Err(EngineError::InvalidInput(
                "twist components must lie in [-1, 1]".into(),
            ));
        }
        if !(dt >= 0.0 && dt.is_finite()) || !delta_theta.is_finite() {
            return Err(EngineError::InvalidInput("dt and delta_theta must be finite, dt >= 0".into()));
        }
        let k = self.params.input_scaling;
        let (lin, ang) = (self.params.linear_rate * dt, self.params.angular_rate * dt);
        let camera = self.camera_pose;
        let joint = {
            let obj = self.object(id)?;
            self.models[obj.active().model_index].model.joint().copied()
        };
        if delta_theta != 0.0 && joint.is_none() {
            return Err(EngineError::StaticArticulationInput);
        }
        let step = scale_input(raw_twist, k).scaled(lin, ang);
        let obj = self.object_mut(id)?;
        let idx = obj.active_index;
        let r = &mut obj.fits[idx].result;
        r.pose = apply_twist(&r.pose, &step, &camera);
        if let Some(j) = joint {
            r.theta = j.clamp(r.theta + delta_theta);
        }
        let result = r.clone();
        accumulate(&mut obj.pending, &step, delta_theta, now);
        self.active_object = Some(id);
        self.revision += 1;
        Ok(result)
    }

    /// Sets the active fit's pose and joint angle directly (marker-style
    /// input). The angle is clamped to the joint limits.
    pub fn set_active_pose(
        &mut self,
        id: u64,
        pose: RigidTransform,
        theta: f64,
        now: Duration,
    ) -> Result<FitResult, EngineError> {
        if !pose.is_finite() || !theta.is_finite() {
            return Err(EngineError::InvalidInput("pose is not finite".into()));
        }
        let joint = {
            let obj = self.object(id)?;
            self.models[obj.active().model_index].model.joint().copied()
        };
        let obj = self.object_mut(id)?;
        let idx = obj.active_index;
        let r = &mut obj.fits[idx].result;
        if joint.is_none() && theta != 0.0 {
            return Err(EngineError::StaticArticulationInput);
        }
        let new_theta = joint.map_or(0.0, |j| j.clamp(theta));
        let delta = new_theta - r.theta;
        r.pose = pose;
        r.theta = new_theta;
        let result = r.clone();
        accumulate(&mut obj.pending, &Twist6::zero(), delta, now);
        self.active_object = Some(id);
        self.revision += 1;
        Ok(result)
    }

    /// Refits the active model if refitting is enabled, a correction is
    /// pending and the input has been quiet for the debounce period.
    pub fn maybe_refit(&mut self, id: u64, now: Duration) -> Result<Option<FitResult>, EngineError> {
        let debounce = self.params.debounce();
        let obj = self.object(id)?;
        let due = match &obj.pending {
            Some(p) => now.saturating_sub(p.last_input) >= debounce,
            None => false,
        };
        if !self.refit_enabled || !due {
            return Ok(None);
        }
        self.refit_now(id).map(Some)
    }

    /// Objects whose debounce period has elapsed at `now`.
    pub fn due_refits(&self, now: Duration) -> Vec<u64> {
        if !self.refit_enabled {
            return Vec::new();
        }
        let debounce = self.params.debounce();
        self.objects
            .iter()
            .filter(|o| o.pending.is_some_and(|p| now.saturating_sub(p.last_input) >= debounce))
            .map(|o| o.id)
            .collect()
    }

    /// Earliest time at which some pending correction becomes due.
    pub fn next_refit_deadline(&self) -> Option<Duration> {
        if !self.refit_enabled {
            return None;
        }
        let debounce = self.params.debounce();
        self.objects
            .iter()
            .filter_map(|o| o.pending.map(|p| p.last_input + debounce))
            .min()
    }

    /// Refits the active model from its current state immediately,
    /// regardless of the debounce timer or the refit toggle.
    pub fn refit_now(&mut self, id: u64) -> Result<FitResult, EngineError> {
        let obj = self.object(id)?;
        let active = obj.active().clone();
        let crop = Arc::clone(&obj.crops[active.model_index]);
        let entry = &self.models[active.model_index];
        let params = FitParams {
            seed: derive_seed(self.params.fit.seed, active.model_index as u64),
            ..self.params.fit.clone()
        };
        let result = if crop.is_empty() {
            Ok(active.result.clone())
        } else {
            fit::refit(
                &entry.model,
                &entry.sampled,
                &crop,
                &active.result.pose,
                active.result.theta,
                &params,
            )
        };
        // A failed refit still consumes the pending correction, so the
        // debounce timer does not retry it.
        let result = match result {
            Ok(r) => r,
            Err(e) => {
                self.object_mut(id)?.pending = None;
                return Err(e.into());
            }
        };
        let obj = self.object_mut(id)?;
        let idx = obj.active_index;
        obj.fits[idx].result = result.clone();
        obj.pending = None;
        let keep = obj.fits[idx].model_index;
        rank(&mut obj.fits);
        obj.active_index = obj
            .fits
            .iter()
            .position(|f| f.model_index == keep)
            .expect("active model survives ranking");
        self.revision += 1;
        Ok(result)
    }

    pub fn delete_object(&mut self, id: u64) -> Result<(), EngineError> {
        let pos = self
            .objects
            .iter()
            .position(|o| o.id == id)
            .ok_or(EngineError::UnknownObject(id))?;
        self.objects.remove(pos);
        if self.active_object == Some(id) {
            self.active_object = None;
        }
        self.revision += 1;
        Ok(())
    }

    /// Active fit of every object, in creation order.
    pub fn export_fits(&self) -> RegistrationReport {
        RegistrationReport {
            objects: self
                .objects
                .iter()
                .map(|o| {
                    let f = o.active();
                    let t = f.result.pose.translation;
                    ExportedObject {
                        id: o.id,
                        model: f.model.clone(),
                        position: [t.x, t.y, t.z],
                        orientation: f.result.pose.rotation.to_array(),
                        theta: f.result.theta,
                        residual: f.result.residual,
                        likelihood: f.result.likelihood,
                    }
                })
                .collect(),
        }
    }
}

fn accumulate(pending: &mut Option<PendingCorrection>, step: &Twist6, delta_theta: f64, now: Duration) {
    let p = pending.get_or_insert(PendingCorrection {
        twist: Twist6::zero(),
        delta_theta: 0.0,
        last_input: now,
    });
    p.twist = Twist6::new(p.twist.linear + step.linear, p.twist.angular + step.angular);
    p.delta_theta += delta_theta;
    p.last_input = p.last_input.max(now);
}

fn fit_model(
    m: &ModelEntry,
    crop: &SpatialIndex,
    seed_point: &Point3,
    params: &FitParams,
) -> Result<FitResult, EngineError> {
    if crop.is_empty() {
        let theta = m.model.joint().map_or(0.0, |j| j.clamp(0.0));
        return Ok(FitResult {
            pose: RigidTransform::from_translation(*seed_point),
            theta,
            residual: f64::INFINITY,
            inliers: 0,
            likelihood: 0.0,
            converged: false,
            iterations: 0,
        });
    }
    let r = if m.model.is_articulated() {
        fit::hybrid_articulated_fit(&m.model, &m.sampled, crop, seed_point, params)?
    } else {
        fit::restart_fit_static(&m.sampled, crop, seed_point, params)?
    };
    Ok(r)
}
