use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use artireg::cloud::{write_pcd, PcdEncoding};
use artireg::eval::{generate_scene, library, run_batch, BatchConfig, EvalError, SceneObject};
use artireg::geom::{Point3, RigidTransform, UnitQuaternion};
use clap::Parser;

/// Fit models to synthetic scenes and report errors against ground truth.
///
/// Writes `report.json` and `report.txt` into the output directory.
#[derive(Parser)]
#[command(name = "fit-eval", version)]
struct Args {
    /// Batch configuration (TOML).
    #[arg(long, required_unless_present = "export_models")]
    config: Option<PathBuf>,
    /// Output directory for the report.
    #[arg(long, required_unless_present_any = ["export_models", "write_scene"])]
    out: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Runs trials one at a time.
    #[arg(long)]
    serial: bool,
    /// Writes the built-in models (STL meshes plus descriptions) to this
    /// directory and exits.
    #[arg(long, value_name = "DIR")]
    export_models: Option<PathBuf>,
    /// Writes one scene of the configuration (objects at their nominal
    /// poses, first sweep cell, no jitter) as binary PCD instead of
    /// evaluating.
    #[arg(long, value_name = "FILE", requires = "config", conflicts_with = "out")]
    write_scene: Option<PathBuf>,
}

fn write_scene(config: &Path, file: &Path, args: &Args) -> Result<(), EvalError> {
    let mut cfg = BatchConfig::load(config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let base = config.parent().unwrap_or_else(|| Path::new("."));
    let models = cfg.resolve_models(base)?;
    let objects = cfg
        .objects
        .iter()
        .map(|o| {
            let model = models.iter().find(|m| m.name == o.model).expect("resolved");
            let [w, x, y, z] = o.orientation;
            let q = UnitQuaternion::new_normalize(w, x, y, z).expect("validated");
            let theta = match (o.theta, model.joint()) {
                (Some(t), _) => t,
                (None, Some(j)) => 0.5 * (j.theta_min() + j.theta_max()),
                (None, None) => 0.0,
            };
            let [px, py, pz] = o.position;
            SceneObject {
                model,
                pose: RigidTransform::new(q, Point3::new(px, py, pz)),
                theta,
            }
        })
        .collect::<Vec<_>>();
    let cell = &cfg.sweep()[0];
    let scene = generate_scene(&objects, cfg.density, cell.noise, cell.occlusion, cfg.seed)?;
    write_pcd(file, &scene.cloud, PcdEncoding::Binary).map_err(|e| EvalError::Config(format!("{}: {e}", file.display())))?;
    eprintln!("{} points written to {}", scene.cloud.len(), file.display());
    Ok(())
}

fn evaluate(config: &Path, out: &Path, args: &Args) -> Result<(), EvalError> {
    let mut cfg = BatchConfig::load(config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    if args.serial {
        cfg.parallel = false;
    }
    cfg.validate()?;
    let base = config.parent().unwrap_or_else(|| Path::new("."));
    let start = Instant::now();
    let report = run_batch(&cfg, base)?;
    report.write(out)?;
    print!("{}", report.to_table());
    eprintln!("{}", report.timing_summary());
    eprintln!(
        "{} rows in {:.1} s, written to {}",
        report.rows.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(dir) = &args.export_models {
        return match library::export(dir) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("fit-eval: {e}");
                ExitCode::FAILURE
            }
        };
    }
    if let (Some(config), Some(file)) = (&args.config, &args.write_scene) {
        return match write_scene(config, file, &args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("fit-eval: {e}");
                ExitCode::from(2)
            }
        };
    }
    let (Some(config), Some(out)) = (&args.config, &args.out) else {
        unreachable!("clap enforces --config and --out");
    };
    match evaluate(config, out, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fit-eval: {e}");
            ExitCode::from(2)
        }
    }
}
