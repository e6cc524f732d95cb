//! Built-in synthetic models used by tests, benches and the default
//! evaluation configs. Dimensions are in meters and roughly desk scale.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, PI};
use std::path::Path;

use nalgebra::Vector3;

use crate::geom::{Point3, RigidTransform, UnitQuaternion};
use crate::model::primitives::{box_mesh, cylinder_mesh};
use crate::model::{write_stl, ModelError, ModelKind, ObjectModel, RevoluteJoint, StlEncoding};

const SEGMENTS: usize = 24;

fn half_turn(axis: Vector3<f64>) -> RigidTransform {
    RigidTransform::from_rotation(UnitQuaternion::from_axis_angle(&axis, PI))
}

/// Pipe body with a lever handle turning a quarter turn about z.
pub fn ball_valve() -> ObjectModel {
    let body = box_mesh(Vector3::new(0.06, 0.025, 0.025), Point3::zeros())
        .merged(&box_mesh(Vector3::new(0.02, 0.02, 0.015), Point3::new(0.0, 0.0, 0.04)));
    let handle = box_mesh(Vector3::new(0.06, 0.0125, 0.005), Point3::new(0.05, 0.0, 0.06));
    let joint = RevoluteJoint::new(Point3::new(0.0, 0.0, 0.06), Vector3::z(), 0.0, FRAC_PI_2)
        .expect("valid joint");
    ObjectModel::new_articulated("ball_valve", body, handle, joint).expect("non-empty links")
}

/// Wall box with a toggle lever on its front face, swinging outward.
pub fn lever_switch() -> ObjectModel {
    let base = box_mesh(Vector3::new(0.04, 0.03, 0.06), Point3::zeros());
    let lever = box_mesh(Vector3::new(0.008, 0.008, 0.05), Point3::new(0.0, 0.04, 0.05));
    let joint = RevoluteJoint::new(Point3::new(0.0, 0.04, 0.0), -Vector3::x(), 0.0, FRAC_PI_2)
        .expect("valid joint");
    ObjectModel::new_articulated("lever_switch", base, lever, joint).expect("non-empty links")
}

/// Back plate and spindle with a handle turning about the spindle.
pub fn door_handle() -> ObjectModel {
    let base = box_mesh(Vector3::new(0.015, 0.005, 0.05), Point3::zeros())
        .merged(&box_mesh(Vector3::new(0.006, 0.015, 0.006), Point3::new(0.0, 0.02, 0.02)));
    let handle = box_mesh(Vector3::new(0.05, 0.007, 0.006), Point3::new(0.045, 0.035, 0.02));
    let joint = RevoluteJoint::new(Point3::new(0.0, 0.035, 0.02), Vector3::y(), 0.0, FRAC_PI_3)
        .expect("valid joint");
    ObjectModel::new_articulated("door_handle", base, handle, joint).expect("non-empty links")
}

/// Right-angle pipe fitting; the half turn about the bisector swaps its arms.
pub fn pipe_elbow() -> ObjectModel {
    let mesh = box_mesh(Vector3::new(0.025, 0.025, 0.025), Point3::zeros())
        .merged(&cylinder_mesh(0.02, 0.1, Vector3::x(), Point3::new(0.05, 0.0, 0.0), SEGMENTS))
        .merged(&cylinder_mesh(0.02, 0.1, Vector3::z(), Point3::new(0.0, 0.0, 0.05), SEGMENTS));
    let bisector = Vector3::new(1.0, 0.0, 1.0).normalize();
    ObjectModel::new_static("pipe_elbow", mesh).with_symmetries(vec![half_turn(bisector)])
}

/// Enclosure with a cable gland centered on its lid.
pub fn junction_box() -> ObjectModel {
    let mesh = box_mesh(Vector3::new(0.06, 0.04, 0.03), Point3::zeros())
        .merged(&cylinder_mesh(0.012, 0.02, Vector3::z(), Point3::new(0.0, 0.0, 0.04), SEGMENTS));
    ObjectModel::new_static("junction_box", mesh).with_symmetries(vec![half_turn(Vector3::z())])
}

/// Three articulated models followed by two static ones.
pub fn all() -> Vec<ObjectModel> {
    vec![ball_valve(), lever_switch(), door_handle(), pipe_elbow(), junction_box()]
}

pub fn by_name(name: &str) -> Option<ObjectModel> {
    all().into_iter().find(|m| m.name == name)
}

/// Writes every built-in model as binary STL links plus a description file
/// into `dir`.
pub fn export(dir: &Path) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)?;
    for m in all() {
        let mut text = format!("name = \"{}\"\n", m.name);
        match &m.kind {
            ModelKind::Static { mesh } => {
                let file = format!("{}.stl", m.name);
                write_stl(dir.join(&file), mesh, StlEncoding::Binary)?;
                text += &format!("type = \"static\"\nmesh = \"{file}\"\n");
            }
            ModelKind::Articulated { base, moving, joint } => {
                let (b, mv) = (format!("{}_base.stl", m.name), format!("{}_moving.stl", m.name));
                write_stl(dir.join(&b), base, StlEncoding::Binary)?;
                write_stl(dir.join(&mv), moving, StlEncoding::Binary)?;
                let (o, a) = (joint.origin(), joint.axis());
                text += &format!(
                    "type = \"revolute\"\n\n[links]\nbase = \"{b}\"\nmoving = \"{mv}\"\n\n[joint]\n\
                     origin = [{:?}, {:?}, {:?}]\naxis = [{:?}, {:?}, {:?}]\nlimits = [{:?}, {:?}]\n",
                    o.x, o.y, o.z, a.x, a.y, a.z, joint.theta_min(), joint.theta_max()
                );
            }
        }
        for s in &m.symmetries {
            let axis = s.rotation.vector_part().normalize();
            let t = s.translation;
            text += &format!(
                "\n[[symmetry]]\naxis = [{:?}, {:?}, {:?}]\nangle = {:?}\ntranslation = [{:?}, {:?}, {:?}]\n",
                axis.x,
                axis.y,
                axis.z,
                s.rotation.angle(),
                t.x,
                t.y,
                t.z
            );
        }
        std::fs::write(dir.join(format!("{}.toml", m.name)), text)?;
    }
    Ok(())
}
