//! Batch evaluation over synthetic scenes.
//!
//! ```toml
//! seed = 7
//! trials = 10
//! density = 20000.0        # points per m² of model surface
//! noise = [0.0, 0.002]     # sweep, meters
//! occlusion = [0.0, 0.2]   # sweep, fraction
//! seed_point_jitter = 0.0  # meters
//!
//! [[models]]
//! builtin = "ball_valve"
//! [[models]]
//! path = "models/pipe_elbow.toml"
//!
//! [[objects]]
//! model = "ball_valve"
//! position = [0.0, 0.0, 0.0]
//! orientation = [1.0, 0.0, 0.0, 0.0]
//! theta = 0.7853981633974483   # omit to draw uniformly within the limits
//! rotation_jitter = 3.141592653589793
//!
//! [engine]
//! voxel_leaf = 0.004
//! [engine.fit]
//! restarts = 25
//! ```
//!
//! Trial `k` draws every random quantity from `(seed, k)`, so sweep cells
//! share placements and the report is independent of thread scheduling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit_errors, generate_scene, library, match_objects, EvalError, FitErrors, SceneObject};
use crate::engine::{EngineParams, Session};
use crate::exec;
use crate::fit::{derive_seed, FitParams};
use crate::geom::{Point3, RigidTransform, UnitQuaternion};
use crate::model::{load_model_description, ObjectModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Builtin(String),
    /// Model description file, relative to the config file.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub model: String,
    pub position: [f64; 3],
    /// `[w, x, y, z]`
    #[serde(default = "identity_orientation")]
    pub orientation: [f64; 4],
    /// Joint angle; drawn uniformly within the limits per trial when absent.
    pub theta: Option<f64>,
    /// Per-axis uniform jitter of the position (m).
    #[serde(default)]
    pub position_jitter: f64,
    /// Extra rotation about a uniformly random axis, angle uniform in
    /// `[0, rotation_jitter]` (rad).
    #[serde(default)]
    pub rotation_jitter: f64,
}

fn identity_orientation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub noise: f64,
    pub occlusion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub seed: u64,
    pub trials: usize,
    pub density: f64,
    #[serde(default = "zero_sweep")]
    pub noise: Vec<f64>,
    #[serde(default = "zero_sweep")]
    pub occlusion: Vec<f64>,
    #[serde(default)]
    pub seed_point_jitter: f64,
    /// Success thresholds for the aggregate table.
    #[serde(default = "default_thresholds")]
    pub success_thresholds: [f64; 3],
    /// Run trials on the worker pool.
    #[serde(default = "yes")]
    pub parallel: bool,
    pub models: Vec<ModelSource>,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub engine: EngineParams,
}

fn zero_sweep() -> Vec<f64> {
    vec![0.0]
}

fn default_thresholds() -> [f64; 3] {
    [0.005, 5f64.to_radians(), 5f64.to_radians()]
}

fn yes() -> bool {
    true
}

impl BatchConfig {
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let cfg: Self = toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Config(m.to_string()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return bad("density must be positive");
        }
        if self.noise.is_empty() || self.noise.iter().any(|n| !(*n >= 0.0 && n.is_finite())) {
            return bad("noise values must be non-negative");
        }
        if self.occlusion.is_empty() || self.occlusion.iter().any(|o| !(0.0..1.0).contains(o)) {
            return bad("occlusion values must lie in [0, 1)");
        }
        if self.models.is_empty() {
            return bad("no models");
        }
        if self.objects.is_empty() {
            return bad("no objects");
        }
        if !(self.seed_point_jitter >= 0.0 && self.seed_point_jitter.is_finite()) {
            return bad("seed_point_jitter must be non-negative");
        }
        for o in &self.objects {
            if !(o.position_jitter >= 0.0 && o.rotation_jitter >= 0.0) {
                return bad("jitter must be non-negative");
            }
            if UnitQuaternion::new_normalize(o.orientation[0], o.orientation[1], o.orientation[2], o.orientation[3])
                .is_none()
            {
                return bad("object orientation is not a rotation");
            }
        }
        self.engine
            .validate()
            .map_err(|e| EvalError::Config(e.to_string()))
    }

    pub fn sweep(&self) -> Vec<SweepSpec> {
        let mut cells = Vec::new();
        for &noise in &self.noise {
            for &occlusion in &self.occlusion {
                cells.push(SweepSpec { noise, occlusion });
            }
        }
        cells
    }

    /// Loads every model, resolving paths against `base_dir`.
    pub fn resolve_models(&self, base_dir: &Path) -> Result<Vec<ObjectModel>, EvalError> {
        let models = self
            .models
            .iter()
            .map(|src| match src {
                ModelSource::Builtin(name) => library::by_name(name)
                    .ok_or_else(|| EvalError::Config(format!("unknown builtin model {name}"))),
                ModelSource::Path(p) => {
                    let full = base_dir.join(p);
                    if !full.exists() {
                        return Err(EvalError::Config(format!("model file not found: {}", full.display())));
                    }
                    load_model_description(&full)
                        .map_err(|e| EvalError::Config(format!("{}: {e}", full.display())))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (i, m) in models.iter().enumerate() {
            if models[..i].iter().any(|o| o.name == m.name) {
                return Err(EvalError::Config(format!("duplicate model name {}", m.name)));
            }
        }
        for o in &self.objects {
            let m = models
                .iter()
                .find(|m| m.name == o.model)
                .ok_or_else(|| EvalError::Config(format!("object refers to unknown model {}", o.model)))?;
            if let (Some(t), Some(j)) = (o.theta, m.joint()) {
                if !j.contains(t) {
                    return Err(EvalError::Config(format!("theta {t} outside the limits of {}", m.name)));
                }
            }
        }
        Ok(models)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub cell: usize,
    pub trial: usize,
    pub noise: f64,
    pub occlusion: f64,
    pub object: usize,
    pub model: String,
    /// Active model of the matched fit; `None` when the object was missed.
    pub fitted_model: Option<String>,
    /// Present when the matched fit uses the right model.
    pub errors: Option<FitErrors>,
    pub theta: Option<f64>,
    pub residual: Option<f64>,
    pub likelihood: Option<f64>,
}

impl TrialRow {
    pub fn success(&self, thresholds: &[f64; 3]) -> bool {
        self.errors.is_some_and(|e| {
            e.position_error <= thresholds[0]
                && e.rotation_error <= thresholds[1]
                && e.articulation_error <= thresholds[2]
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub cell: usize,
    pub noise: f64,
    pub occlusion: f64,
    pub model: String,
    pub count: usize,
    pub correct_model: usize,
    pub successes: usize,
    pub mean: FitErrors,
    pub sd: FitErrors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub seed: u64,
    pub trials: usize,
    pub rows: Vec<TrialRow>,
    pub aggregates: Vec<AggregateRow>,
    /// Wall time per `(cell, trial)`, in row order. Not part of the
    /// serialized report.
    #[serde(skip)]
    pub trial_seconds: Vec<f64>,
}

impl BatchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text tables: aggregates per cell and model, then one line
    /// per trial and object.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}  trials {}", self.seed, self.trials);
        let _ = writeln!(
            s,
            "{:>4} {:>7} {:>6} {:<14} {:>5} {:>5} {:>5} {:>17} {:>17} {:>17} {:>17}",
            "cell", "noise", "occl", "model", "n", "right", "ok",
            "pos mm", "rot deg", "art deg", "pointwise mm"
        );
        for a in &self.aggregates {
            let pair = |m: f64, sd: f64, k: f64| format!("{:.3} ± {:.3}", m * k, sd * k);
            let deg = 180.0 / std::f64::consts::PI;
            let _ = writeln!(
                s,
                "{:>4} {:>7.4} {:>6.2} {:<14} {:>5} {:>5} {:>5} {:>17} {:>17} {:>17} {:>17}",
                a.cell,
                a.noise,
                a.occlusion,
                a.model,
                a.count,
                a.correct_model,
                a.successes,
                pair(a.mean.position_error, a.sd.position_error, 1e3),
                pair(a.mean.rotation_error, a.sd.rotation_error, deg),
                pair(a.mean.articulation_error, a.sd.articulation_error, deg),
                pair(a.mean.mean_pointwise_error, a.sd.mean_pointwise_error, 1e3),
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:>4} {:>5} {:>6} {:<14} {:<14} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "cell", "trial", "object", "model", "fitted", "pos mm", "rot deg", "art deg", "pw mm", "theta"
        );
        for r in &self.rows {
            let (cols, theta) = match (&r.errors, r.theta) {
                (Some(e), Some(t)) => (
                    format!(
                        "{:>9.3} {:>9.3} {:>9.3} {:>9.3}",
                        e.position_error * 1e3,
                        e.rotation_error.to_degrees(),
                        e.articulation_error.to_degrees(),
                        e.mean_pointwise_error * 1e3
                    ),
                    format!("{t:>9.4}"),
                ),
                _ => (format!("{:>9} {:>9} {:>9} {:>9}", "-", "-", "-", "-"), format!("{:>9}", "-")),
            };
            let _ = writeln!(
                s,
                "{:>4} {:>5} {:>6} {:<14} {:<14} {cols} {theta}",
                r.cell,
                r.trial,
                r.object,
                r.model,
                r.fitted_model.as_deref().unwrap_or("-"),
            );
        }
        s
    }

    /// Mean wall time per trial; empty for a deserialized report.
    pub fn timing_summary(&self) -> String {
        if self.trial_seconds.is_empty() {
            return String::new();
        }
        let n = self.trial_seconds.len();
        let mean = self.trial_seconds.iter().sum::<f64>() / n as f64;
        format!("mean trial time {mean:.3} s over {n} trials")
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join("report.json"), self.to_json()).map_err(io)?;
        std::fs::write(dir.join("report.txt"), self.to_table()).map_err(io)?;
        Ok(())
    }
}

/// Runs every sweep cell for `config.trials` trials. Model paths resolve
/// against `base_dir`.
pub fn run_batch(config: &BatchConfig, base_dir: &Path) -> Result<BatchReport, EvalError> {
    config.validate()?;
    let models = config.resolve_models(base_dir)?;
    let cells = config.sweep();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..config.trials).map(move |k| (c, k)))
        .collect();
    let outcomes = exec::map_slice(&jobs, config.parallel, |_, &(c, k)| {
        let start = std::time::Instant::now();
        let rows = run_trial(config, &models, c, &cells[c], k);
        rows.map(|r| (r, start.elapsed().as_secs_f64()))
    });
    let mut rows = Vec::new();
    let mut trial_seconds = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let (r, secs) = o?;
        rows.extend(r);
        trial_seconds.push(secs);
    }
    let aggregates = aggregate(&rows, &cells, config);
    Ok(BatchReport {
        seed: config.seed,
        trials: config.trials,
        rows,
        aggregates,
        trial_seconds,
    })
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn run_trial(
    config: &BatchConfig,
    models: &[ObjectModel],
    cell: usize,
    sweep: &SweepSpec,
    trial: usize,
) -> Result<Vec<TrialRow>, EvalError> {
    let trial_seed = derive_seed(config.seed, trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let mut placed = Vec::with_capacity(config.objects.len());
    for o in &config.objects {
        let model = models.iter().find(|m| m.name == o.model).expect("resolved");
        let [w, x, y, z] = o.orientation;
        let mut q = UnitQuaternion::new_normalize(w, x, y, z).expect("validated");
        if o.rotation_jitter > 0.0 {
            let axis = unit_vector(&mut rng);
            q = UnitQuaternion::from_axis_angle(&axis, rng.random_range(0.0..=o.rotation_jitter)) * q;
        }
        let mut t = Point3::from(o.position);
        if o.position_jitter > 0.0 {
            let j = o.position_jitter;
            t += Vector3::new(rng.random_range(-j..=j), rng.random_range(-j..=j), rng.random_range(-j..=j));
        }
        let theta = match (model.joint(), o.theta) {
            (Some(_), Some(t)) => t,
            (Some(j), None) if j.theta_max() > j.theta_min() => rng.random_range(j.theta_min()..=j.theta_max()),
            (Some(j), None) => j.theta_min(),
            (None, _) => 0.0,
        };
        placed.push(SceneObject {
            model,
            pose: RigidTransform::new(q, t),
            theta,
        });
    }
    let scene = generate_scene(
        &placed,
        config.density,
        sweep.noise,
        sweep.occlusion,
        derive_seed(trial_seed, 1),
    )?;
    let params = EngineParams {
        fit: FitParams {
            seed: derive_seed(trial_seed, 2),
            parallel: config.engine.fit.parallel && !config.parallel,
            ..config.engine.fit.clone()
        },
        ..config.engine.clone()
    };
    let mut session = Session::new(&scene.cloud, models.to_vec(), params)
        .map_err(|e| EvalError::Scene(e.to_string()))?;

    for (obj, truth) in placed.iter().zip(&scene.truth) {
        let index = models.iter().position(|m| m.name == truth.model).expect("resolved");
        let (_, sm) = session.model(index).expect("model index");
        let local = sm.local_points(obj.theta);
        let center = local.iter().sum::<Point3>() / local.len().max(1) as f64;
        let mut seed_point = obj.pose.apply(&center);
        if config.seed_point_jitter > 0.0 {
            let r = config.seed_point_jitter * rng.random::<f64>().cbrt();
            seed_point += unit_vector(&mut rng) * r;
        }
        // A click with no scene points nearby leaves the object unmatched.
        let _ = session.add_search_point(seed_point);
    }

    let report = session.export_fits();
    let truth_pos: Vec<Point3> = scene.truth.iter().map(|t| t.pose.translation).collect();
    let fit_pos: Vec<Point3> = report.objects.iter().map(|o| Point3::from(o.position)).collect();
    let matching = match_objects(&truth_pos, &fit_pos);
    let mut rows: Vec<TrialRow> = scene
        .truth
        .iter()
        .enumerate()
        .map(|(i, t)| TrialRow {
            cell,
            trial,
            noise: sweep.noise,
            occlusion: sweep.occlusion,
            object: i,
            model: t.model.clone(),
            fitted_model: None,
            errors: None,
            theta: None,
            residual: None,
            likelihood: None,
        })
        .collect();
    for &(ti, fi) in &matching.pairs {
        let obj = &session.objects()[fi];
        let active = obj.active();
        let (_, sm) = session.model(active.model_index).expect("model index");
        let row = &mut rows[ti];
        row.fitted_model = Some(active.model.clone());
        row.errors = fit_errors(&scene.truth[ti], &active.model, &active.result, sm).ok();
        row.theta = Some(active.result.theta);
        row.residual = Some(active.result.residual);
        row.likelihood = Some(active.result.likelihood);
    }
    Ok(rows)
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(rows: &[TrialRow], cells: &[SweepSpec], config: &BatchConfig) -> Vec<AggregateRow> {
    let mut names: Vec<&str> = Vec::new();
    for o in &config.objects {
        if !names.contains(&o.model.as_str()) {
            names.push(&o.model);
        }
    }
    let mut out = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        for name in &names {
            let group: Vec<&TrialRow> = rows.iter().filter(|r| r.cell == c && r.model == *name).collect();
            let errs: Vec<FitErrors> = group.iter().filter_map(|r| r.errors).collect();
            let stat = |f: fn(&FitErrors) -> f64| mean_sd(&errs.iter().map(f).collect::<Vec<_>>());
            let (p, r, a, m) = (
                stat(|e| e.position_error),
                stat(|e| e.rotation_error),
                stat(|e| e.articulation_error),
                stat(|e| e.mean_pointwise_error),
            );
            out.push(AggregateRow {
                cell: c,
                noise: cell.noise,
                occlusion: cell.occlusion,
                model: name.to_string(),
                count: group.len(),
                correct_model: errs.len(),
                successes: group.iter().filter(|r| r.success(&config.success_thresholds)).count(),
                mean: FitErrors {
                    position_error: p.0,
                    rotation_error: r.0,
                    articulation_error: a.0,
                    mean_pointwise_error: m.0,
                },
                sd: FitErrors {
                    position_error: p.1,
                    rotation_error: r.1,
                    articulation_error: a.1,
                    mean_pointwise_error: m.1,
                },
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 3
trials = 2
density = 15000.0
noise = [0.0, 0.001]

[[models]]
builtin = "ball_valve"
[[models]]
builtin = "junction_box"

[[objects]]
model = "ball_valve"
position = [0.0, 0.0, 0.0]
theta = 0.5
rotation_jitter = 0.5

[[objects]]
model = "junction_box"
position = [0.4, 0.0, 0.0]

[engine.fit]
restarts = 8
"#;

    #[test]
    fn small_batch_runs_and_repeats() {
        let cfg = BatchConfig::from_toml(SMALL).unwrap();
        let a = run_batch(&cfg, Path::new(".")).unwrap();
        assert_eq!(a.rows.len(), 2 * 2 * 2);
        assert_eq!(a.aggregates.len(), 2 * 2);
        assert_eq!(a.trial_seconds.len(), 4);
        let clean: Vec<_> = a.rows.iter().filter(|r| r.noise == 0.0).collect();
        for r in clean {
            let e = r.errors.expect("matched with the right model");
            assert!(e.position_error < 5e-3, "{r:?}");
        }
        let b = run_batch(&cfg, Path::new(".")).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!(!a.to_json().contains("trial_seconds"));
        assert!(a.to_table().contains("junction_box"));
    }

    #[test]
    fn config_errors_name_the_problem() {
        let missing = SMALL.replace("builtin = \"junction_box\"", "path = \"nowhere/box.toml\"");
        let cfg = BatchConfig::from_toml(&missing).unwrap();
        match run_batch(&cfg, Path::new("/tmp")) {
            Err(EvalError::Config(msg)) => assert!(msg.contains("nowhere/box.toml"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(BatchConfig::from_toml(&SMALL.replace("trials = 2", "trials = 0")).is_err());
        assert!(BatchConfig::from_toml(&SMALL.replace("seed = 3", "seed = 3\nbogus = 1")).is_err());
        let unknown = SMALL.replace("model = \"junction_box\"", "model = \"ghost\"");
        let cfg = BatchConfig::from_toml(&unknown).unwrap();
        assert!(matches!(run_batch(&cfg, Path::new(".")), Err(EvalError::Config(m)) if m.contains("ghost")));
    }

    #[test]
    fn report_writes_files() {
        let cfg = BatchConfig::from_toml(&SMALL.replace("trials = 2", "trials = 1").replace("noise = [0.0, 0.001]", "")).unwrap();
        let r = run_batch(&cfg, Path::new(".")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: BatchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows, r.rows);
        assert!(dir.path().join("report.txt").exists());
    }

    #[test]
    fn sd_is_sample_sd() {
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[]), (0.0, 0.0));
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
    }
}
