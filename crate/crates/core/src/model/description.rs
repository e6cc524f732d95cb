//! Model description files.
//!
//! A TOML document per model. Mesh paths are resolved relative to the file.
//!
//! ```toml
//! name = "ball_valve"
//! type = "revolute"          # or "static", which takes `mesh = "..."`
//! sample_count = 400         # optional
//!
//! [links]
//! base = "valve_body.stl"
//! moving = "valve_handle.stl"
//!
//! [joint]
//! origin = [0.0, 0.0, 0.04]
//! axis = [0.0, 0.0, 1.0]
//! limits = [0.0, 1.5707963267948966]
//!
//! [[symmetry]]               # optional, evaluation only
//! axis = [1.0, 0.0, 0.0]
//! angle = 3.141592653589793
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::Deserialize;

use super::{load_stl, ModelError, ObjectModel, RevoluteJoint, DEFAULT_SAMPLE_COUNT};
use crate::geom::{Point3, RigidTransform, UnitQuaternion};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptionFile {
    name: String,
    #[serde(rename = "type")]
    kind: String,
    mesh: Option<PathBuf>,
    links: Option<Links>,
    joint: Option<JointSpec>,
    sample_count: Option<usize>,
    #[serde(default)]
    symmetry: Vec<SymmetrySpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Links {
    base: PathBuf,
    moving: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointSpec {
    origin: [f64; 3],
    axis: [f64; 3],
    limits: [f64; 2],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SymmetrySpec {
    axis: [f64; 3],
    angle: f64,
    #[serde(default)]
    translation: [f64; 3],
}

pub fn load_model_description(path: impl AsRef<Path>) -> Result<ObjectModel, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        ModelError::ParseFailure(format!("cannot read {}: {e}", path.display()))
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    parse_model_description(&text, dir)
}

/// Parses a description whose relative mesh paths resolve against `base_dir`.
pub fn parse_model_description(text: &str, base_dir: &Path) -> Result<ObjectModel, ModelError> {
    let desc: DescriptionFile =
        toml::from_str(text).map_err(|e| ModelError::ParseFailure(e.to_string()))?;
    let resolve = |p: &Path| {
        let full = base_dir.join(p);
        if full.exists() {
            Ok(full)
        } else {
            Err(ModelError::MissingMesh(full))
        }
    };
    let mut model = match desc.kind.as_str() {
        "static" => {
            let mesh = desc
                .mesh
                .as_deref()
                .ok_or_else(|| ModelError::ParseFailure("static model needs `mesh`".into()))?;
            if desc.joint.is_some() || desc.links.is_some() {
                return Err(ModelError::ParseFailure(
                    "static model cannot declare links or a joint".into(),
                ));
            }
            ObjectModel::new_static(&desc.name, load_stl(resolve(mesh)?)?)
        }
        "revolute" => {
            let links = desc
                .links
                .as_ref()
                .ok_or_else(|| ModelError::ParseFailure("revolute model needs [links]".into()))?;
            let j = desc
                .joint
                .as_ref()
                .ok_or_else(|| ModelError::ParseFailure("revolute model needs [joint]".into()))?;
            let joint = RevoluteJoint::new(
                Point3::from(j.origin),
                Vector3::from(j.axis),
                j.limits[0],
                j.limits[1],
            )?;
            let base = load_stl(resolve(&links.base)?)?;
            let moving = load_stl(resolve(&links.moving)?)?;
            ObjectModel::new_articulated(&desc.name, base, moving, joint)?
        }
        other => {
            return Err(ModelError::ParseFailure(format!(
                "unknown model type {other:?} (expected \"static\" or \"revolute\")"
            )))
        }
    };
    model.sample_count = desc.sample_count.unwrap_or(DEFAULT_SAMPLE_COUNT);
    if model.sample_count < 3 {
        return Err(ModelError::ParseFailure("sample_count must be at least 3".into()));
    }
    model.symmetries = desc
        .symmetry
        .iter()
        .map(|s| {
            let axis = Vector3::from(s.axis);
            if axis.norm() == 0.0 {
                return Err(ModelError::ParseFailure("symmetry axis is zero".into()));
            }
            Ok(RigidTransform::new(
                UnitQuaternion::from_axis_angle(&axis, s.angle),
                Point3::from(s.translation),
            ))
        })
        .collect::<Result<_, _>>()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::primitives::box_mesh;
    use crate::model::{write_stl, ModelKind, StlEncoding};
    use std::f64::consts::FRAC_PI_2;

    fn fixture_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let a = box_mesh(Vector3::new(0.05, 0.05, 0.02), Point3::zeros());
        let b = box_mesh(Vector3::new(0.06, 0.01, 0.01), Point3::new(0.06, 0.0, 0.04));
        write_stl(dir.path().join("body.stl"), &a, StlEncoding::Binary).unwrap();
        write_stl(dir.path().join("handle.stl"), &b, StlEncoding::Ascii).unwrap();
        dir
    }

    #[test]
    fn static_model() {
        let dir = fixture_dir();
        let m = parse_model_description("name = \"crate\"\ntype = \"static\"\nmesh = \"body.stl\"\n", dir.path())
            .unwrap();
        assert!(matches!(m.kind, ModelKind::Static { .. }));
        assert_eq!(m.sample_count, 400);
        assert_eq!(m.name, "crate");
    }

    #[test]
    fn revolute_model() {
        let dir = fixture_dir();
        let text = format!(
            "name = \"valve\"\ntype = \"revolute\"\nsample_count = 300\n[links]\nbase = \"body.stl\"\nmoving = \"handle.stl\"\n[joint]\norigin = [0.0, 0.0, 0.04]\naxis = [0.0, 0.0, 1.0]\nlimits = [0.0, {FRAC_PI_2}]\n[[symmetry]]\naxis = [1.0, 0.0, 0.0]\nangle = 3.14159\n"
        );
        let m = parse_model_description(&text, dir.path()).unwrap();
        let j = m.joint().unwrap();
        assert_eq!((j.theta_min(), j.theta_max()), (0.0, FRAC_PI_2));
        assert_eq!(m.sample_count, 300);
        assert_eq!(m.symmetries.len(), 1);
    }

    #[test]
    fn non_unit_axis_is_rejected() {
        let dir = fixture_dir();
        let text = "name = \"v\"\ntype = \"revolute\"\n[links]\nbase = \"body.stl\"\nmoving = \"handle.stl\"\n[joint]\norigin = [0.0, 0.0, 0.0]\naxis = [0.0, 0.0, 2.0]\nlimits = [0.0, 1.0]\n";
        assert!(matches!(
            parse_model_description(text, dir.path()),
            Err(ModelError::InvalidJoint(_))
        ));
        let swapped = text.replace("[0.0, 0.0, 2.0]", "[0.0, 0.0, 1.0]").replace("[0.0, 1.0]", "[1.0, 0.0]");
        assert!(matches!(
            parse_model_description(&swapped, dir.path()),
            Err(ModelError::InvalidJoint(_))
        ));
    }

    #[test]
    fn missing_mesh_and_bad_syntax() {
        let dir = fixture_dir();
        assert!(matches!(
            parse_model_description("name = \"x\"\ntype = \"static\"\nmesh = \"nope.stl\"\n", dir.path()),
            Err(ModelError::MissingMesh(_))
        ));
        assert!(matches!(
            parse_model_description("name = \"x\"\ntype = \"prismatic\"\n", dir.path()),
            Err(ModelError::ParseFailure(_))
        ));
        assert!(matches!(
            parse_model_description("name = ", dir.path()),
            Err(ModelError::ParseFailure(_))
        ));
    }
}
