//! Serial versus data-parallel fitting on a synthetic valve scene.

use std::hint::black_box;

use artireg::cloud::{cull_sphere, voxel_downsample, PointCloud, SpatialIndex};
use artireg::engine::{EngineParams, Session};
use artireg::eval::{generate_scene, library, SceneObject};
use artireg::fit::{hybrid_articulated_fit, restart_fit_static, FitParams};
use artireg::geom::{Point3, RigidTransform, UnitQuaternion};
use artireg::model::sample_model;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector3;

fn scene() -> (PointCloud, Point3) {
    let valve = library::ball_valve();
    let pose = RigidTransform::new(
        UnitQuaternion::from_axis_angle(&Vector3::new(0.3, -0.2, 1.0), 0.8),
        Vector3::new(0.5, 0.1, 0.3),
    );
    let objs = [SceneObject { model: &valve, pose, theta: 0.6 }];
    let s = generate_scene(&objs, 100_000.0, 0.001, 0.1, 3).unwrap();
    let sm = sample_model(&valve, 0).unwrap();
    let local = sm.local_points(0.6);
    let seed = pose.apply(&(local.iter().sum::<Point3>() / local.len() as f64));
    (voxel_downsample(&s.cloud, 0.005), seed)
}

fn modes() -> Vec<(&'static str, bool)> {
    let mut m = vec![("serial", false)];
    if artireg::exec::parallel_available() {
        m.push(("parallel", true));
    }
    m
}

fn restarts(c: &mut Criterion) {
    let (cloud, seed) = scene();
    let valve = library::ball_valve();
    let elbow = library::pipe_elbow();
    let (sv, se) = (sample_model(&valve, 0).unwrap(), sample_model(&elbow, 0).unwrap());
    let index = SpatialIndex::build(&cull_sphere(&cloud, &seed, sv.max_width));
    let mut g = c.benchmark_group("restarts");
    g.sample_size(10);
    for (name, parallel) in modes() {
        let p = FitParams { parallel, ..FitParams::default() };
        g.bench_with_input(BenchmarkId::new("static", name), &p, |b, p| {
            b.iter(|| black_box(restart_fit_static(&se, &index, &seed, p).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("articulated", name), &p, |b, p| {
            b.iter(|| black_box(hybrid_articulated_fit(&valve, &sv, &index, &seed, p).unwrap()))
        });
    }
    g.finish();
}

fn search_point(c: &mut Criterion) {
    let (cloud, seed) = scene();
    let mut g = c.benchmark_group("add_search_point");
    g.sample_size(10);
    for (name, parallel) in modes() {
        let mut params = EngineParams::default();
        params.fit.parallel = parallel;
        let mut session = Session::new(&cloud, library::all(), params).unwrap();
        g.bench_function(name, |b| {
            b.iter(|| {
                let (id, _) = session.add_search_point(seed).unwrap();
                session.delete_object(id).unwrap();
            })
        });
    }
    g.finish();
}

criterion_group!(benches, restarts, search_point);
criterion_main!(benches);
