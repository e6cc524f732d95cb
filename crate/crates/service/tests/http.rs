use std::sync::Arc;
use std::time::{Duration, Instant};

use artireg::engine::EngineParams;
use artireg::eval::{generate_scene, library, SceneObject};
use artireg::geom::{Point3, RigidTransform, UnitQuaternion};
use artireg::model::sample_model;
use artireg_service::wire::{
    CorrectionRequest, CycleResponse, ErrorBody, ExportResponse, PointResponse, PoseResponse, RevisionResponse,
    StateSnapshot,
};
use artireg_service::{AppState, RunningService, ServiceError};
use futures_util::StreamExt;
use nalgebra::Vector3;
use reqwest::{Client, StatusCode};
use serde_json::json;

struct Fixture {
    service: RunningService,
    client: Client,
    base: String,
    valve_seed: Point3,
}

fn valve_pose() -> RigidTransform {
    RigidTransform::new(
        UnitQuaternion::from_axis_angle(&Vector3::new(0.1, 0.2, 1.0).normalize(), 0.6),
        Vector3::new(0.4, 0.1, 0.2),
    )
}

fn scene_cloud() -> artireg::cloud::PointCloud {
    let (valve, elbow) = (library::ball_valve(), library::pipe_elbow());
    let objs = [
        SceneObject { model: &valve, pose: valve_pose(), theta: 0.5 },
        SceneObject {
            model: &elbow,
            pose: RigidTransform::from_translation(Vector3::new(0.9, 0.1, 0.2)),
            theta: 0.0,
        },
    ];
    generate_scene(&objs, 60_000.0, 0.0, 0.0, 5).unwrap().cloud
}

fn state(debounce: f64) -> (Arc<AppState>, Point3) {
    let sm = sample_model(&library::ball_valve(), 0).unwrap();
    let local = sm.local_points(0.5);
    let seed = valve_pose().apply(&(local.iter().sum::<Point3>() / local.len() as f64));
    let mut params = EngineParams {
        debounce_seconds: debounce,
        ..EngineParams::default()
    };
    params.fit.restarts = 10;
    let models = vec![library::ball_valve(), library::pipe_elbow(), library::junction_box()];
    (AppState::new(scene_cloud(), models, params).unwrap(), seed)
}

async fn fixture_with(debounce: f64) -> Fixture {
    let (st, valve_seed) = state(debounce);
    let service = RunningService::start(st, "127.0.0.1", 0).await.unwrap();
    let base = format!("http://{}", service.addr);
    Fixture {
        service,
        client: Client::new(),
        base,
        valve_seed,
    }
}

async fn fixture() -> Fixture {
    fixture_with(0.2).await
}

impl Fixture {
    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn new_session(&self) -> StateSnapshot {
        let r = self.client.post(self.url("/sessions")).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::CREATED);
        r.json().await.unwrap()
    }

    async fn state(&self, s: u64) -> StateSnapshot {
        self.client.get(self.url(&format!("/sessions/{s}"))).send().await.unwrap().json().await.unwrap()
    }

    async fn click(&self, s: u64, p: Point3) -> PointResponse {
        let r = self
            .client
            .post(self.url(&format!("/sessions/{s}/points")))
            .json(&json!({"point": [p.x, p.y, p.z]}))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        r.json().await.unwrap()
    }

    async fn correct(&self, s: u64, o: u64, body: &CorrectionRequest) -> reqwest::Response {
        self.client
            .post(self.url(&format!("/sessions/{s}/objects/{o}/correction")))
            .json(body)
            .send()
            .await
            .unwrap()
    }

    async fn set_refit(&self, s: u64, enabled: bool) -> RevisionResponse {
        self.client
            .put(self.url(&format!("/sessions/{s}/refit-enabled")))
            .json(&json!({ "enabled": enabled }))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap()
    }
}

fn nudge(ts: f64) -> CorrectionRequest {
    CorrectionRequest {
        linear: [0.5, 0.0, -0.25],
        angular: [0.0, 0.3, 0.0],
        delta_theta: 0.05,
        dt: 0.1,
        timestamp: ts,
    }
}

/// Reads server-sent events until `done` accepts one or `timeout` passes.
async fn wait_for_event(
    resp: reqwest::Response,
    timeout: Duration,
    mut done: impl FnMut(&StateSnapshot) -> bool,
) -> Option<StateSnapshot> {
    let mut stream = resp.bytes_stream();
    let mut buf = String::new();
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        let chunk = tokio::time::timeout_at(deadline, stream.next()).await.ok()??.ok()?;
        buf.push_str(std::str::from_utf8(&chunk).unwrap());
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let data: String = block
                .lines()
                .filter_map(|l| l.strip_prefix("data:"))
                .map(str::trim_start)
                .collect();
            if data.is_empty() {
                continue;
            }
            let snap: StateSnapshot = serde_json::from_str(&data).unwrap();
            if done(&snap) {
                return Some(snap);
            }
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fresh_session_is_empty() {
    let f = fixture().await;
    let created = f.new_session().await;
    assert!(created.objects.is_empty());
    assert_eq!(created.revision, 0);
    assert!(created.refit_enabled);
    assert_eq!(created.models, ["ball_valve", "pipe_elbow", "junction_box"]);
    let got = f.state(created.session).await;
    assert_eq!(got, created);
    f.service.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scene_blob_is_the_voxelized_cloud() {
    let f = fixture().await;
    let s = f.new_session().await.session;
    let r = f.client.get(f.url(&format!("/sessions/{s}/scene"))).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let count: usize = r.headers()["x-point-count"].to_str().unwrap().parse().unwrap();
    let bytes = r.bytes().await.unwrap();
    assert_eq!(bytes.len(), 12 * count);
    let voxelized =
        artireg::engine::Session::new(&scene_cloud(), vec![library::ball_valve()], EngineParams::default()).unwrap();
    assert_eq!(&bytes[..], &voxelized.scene().to_f32_le_bytes()[..]);
    let first = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    assert_eq!(first, voxelized.scene().points[0].x as f32);
    let models: serde_json::Value =
        f.client.get(f.url(&format!("/sessions/{s}/models"))).send().await.unwrap().json().await.unwrap();
    assert_eq!(models[0]["name"], "ball_valve");
    assert_eq!(models[0]["joint"]["limits"][1], std::f64::consts::FRAC_PI_2);
    assert!(models[1]["moving"].is_null());
    f.service.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn point_creates_ranked_object() {
    let f = fixture().await;
    let s = f.new_session().await.session;
    let r = f.click(s, f.valve_seed).await;
    assert_eq!(r.revision, 1);
    assert_eq!(r.active_model, "ball_valve");
    assert_eq!(r.models.len(), 3);
    assert_eq!(r.models[0].model, "ball_valve");
    let snap = f.state(s).await;
    assert_eq!(snap.revision, 1);
    assert_eq!(snap.objects.len(), 1);
    let o = &snap.objects[0];
    assert_eq!(o.id, r.object);
    let t = valve_pose().translation;
    let p = o.pose.position;
    assert!(((p[0] - t.x).powi(2) + (p[1] - t.y).powi(2) + (p[2] - t.z).powi(2)).sqrt() < 0.005);

    // Clicking the object again activates it, then cycles its model.
    let again = f.click(s, f.valve_seed).await;
    assert_eq!(again.object, r.object);
    assert_eq!(serde_json::to_value(again.action).unwrap(), "cycled");
    assert_eq!(again.active_model, r.models[1].model);
    f.service.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn error_mapping() {
    let f = fixture().await;
    let s = f.new_session().await.session;
    let r = f.client.delete(f.url(&format!("/sessions/{s}/objects/77"))).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    assert_eq!(r.json::<ErrorBody>().await.unwrap().error, "unknown_object");
    let r = f.client.get(f.url("/sessions/999")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    assert_eq!(r.json::<ErrorBody>().await.unwrap().error, "unknown_session");

    // Empty space far from every object.
    let r = f
        .client
        .post(f.url(&format!("/sessions/{s}/points")))
        .json(&json!({"point": [10.0, 10.0, 10.0]}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json::<ErrorBody>().await.unwrap().error, "no_scene_points_near_seed");

    let o = f.click(s, f.valve_seed).await.object;
    let mut bad = nudge(1.0);
    bad.linear[0] = 1.5;
    let r = f.correct(s, o, &bad).await;
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let r = f
        .client
        .post(f.url(&format!("/sessions/{s}/objects/{o}/correction")))
        .json(&json!({"linear": [0.1, 0.0, 0.0], "dt": 0.1}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY, "missing timestamp");

    assert_eq!(f.correct(s, o, &nudge(2.0)).await.status(), StatusCode::OK);
    let r = f.correct(s, o, &nudge(2.0)).await;
    assert_eq!(r.status(), StatusCode::CONFLICT);
    assert_eq!(r.json::<ErrorBody>().await.unwrap().error, "stale_sample");

    let rev = f.state(s).await.revision;
    let r = f
        .client
        .post(f.url(&format!("/sessions/{s}/objects/{o}/cycle?expected_revision={}", rev + 5)))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    assert_eq!(r.json::<ErrorBody>().await.unwrap().error, "stale_revision");
    let r = f
        .client
        .post(f.url(&format!("/sessions/{s}/objects/{o}/cycle?expected_revision={rev}")))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.json::<CycleResponse>().await.unwrap().revision, rev + 1);

    let r = f
        .client
        .put(f.url(&format!("/sessions/{s}/camera")))
        .json(&json!({"position": [0.0, 0.0, 0.0], "orientation": [0.0, 0.0, 0.0, 0.0]}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    f.service.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn correction_then_silence_pushes_refit() {
    let debounce = 0.3;
    let f = fixture_with(debounce).await;
    let s = f.new_session().await.session;
    let o = f.click(s, f.valve_seed).await.object;
    let events = f.client.get(f.url(&format!("/sessions/{s}/events"))).send().await.unwrap();
    assert_eq!(events.status(), StatusCode::OK);
    let mut last = None;
    for k in 0..5 {
        let r: PoseResponse = f.correct(s, o, &nudge(k as f64 * 0.1)).await.json().await.unwrap();
        last = Some(r);
    }
    let last = last.unwrap();
    let released = Instant::now();
    let snap = wait_for_event(events, Duration::from_secs(10), |snap| {
        snap.revision > last.revision && !snap.objects[0].pending
    })
    .await
    .expect("refit event");
    let waited = released.elapsed().as_secs_f64();
    assert!(waited >= debounce * 0.9, "refit fired after {waited:.3} s");
    assert!(waited < debounce + 2.0, "refit fired after {waited:.3} s");
    // The refit pulled the nudged pose back toward the object.
    let t = valve_pose().translation;
    let dist = |p: [f64; 3]| ((p[0] - t.x).powi(2) + (p[1] - t.y).powi(2) + (p[2] - t.z).powi(2)).sqrt();
    assert!(dist(snap.objects[0].pose.position) < dist(last.pose.position));
    // No lost update: the pushed revision is what a subsequent read sees.
    assert_eq!(f.state(s).await.revision, snap.revision);
    f.service.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn refit_toggle_suppresses_timer() {
    let f = fixture_with(0.1).await;
    let s = f.new_session().await.session;
    let o = f.click(s, f.valve_seed).await.object;
    let rev = f.set_refit(s, false).await.revision;
    let r: PoseResponse = f.correct(s, o, &nudge(1.0)).await.json().await.unwrap();
    assert_eq!(r.revision, rev + 1);
    tokio::time::sleep(Duration::from_millis(500)).await;
    let snap = f.state(s).await;
    assert_eq!(snap.revision, r.revision);
    assert!(snap.objects[0].pending);
    let manual: PoseResponse = f
        .client
        .post(f.url(&format!("/sessions/{s}/objects/{o}/refit")))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(manual.revision, r.revision + 1);
    assert!(!f.state(s).await.objects[0].pending);
    f.service.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_pollers_see_monotone_revisions() {
    let f = fixture_with(0.05).await;
    let s = f.new_session().await.session;
    let o = f.click(s, f.valve_seed).await.object;
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let pollers: Vec<_> = (0..2)
        .map(|_| {
            let (client, url, stop) = (f.client.clone(), f.url(&format!("/sessions/{s}")), Arc::clone(&stop));
            tokio::spawn(async move {
                let mut seen = Vec::new();
                while !stop.load(std::sync::atomic::Ordering::Relaxed) {
                    let snap: StateSnapshot = client.get(&url).send().await.unwrap().json().await.unwrap();
                    seen.push(snap.revision);
                }
                seen
            })
        })
        .collect();
    for k in 0..10 {
        let r: PoseResponse = f.correct(s, o, &nudge(k as f64)).await.json().await.unwrap();
        // Reads after a response never go back in time.
        assert!(f.state(s).await.revision >= r.revision);
        tokio::time::sleep(Duration::from_millis(if k % 3 == 0 { 120 } else { 10 })).await;
    }
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    for p in pollers {
        let seen = p.await.unwrap();
        assert!(!seen.is_empty());
        assert!(seen.windows(2).all(|w| w[0] <= w[1]), "{seen:?}");
    }
    f.service.stop().await.unwrap();
}

async fn replay(f: &Fixture) -> String {
    let s = f.new_session().await.session;
    f.set_refit(s, false).await;
    f.client
        .put(f.url(&format!("/sessions/{s}/camera")))
        .json(&json!({"position": [0.0, 0.0, 1.0], "orientation": [0.0, 1.0, 0.0, 0.0]}))
        .send()
        .await
        .unwrap();
    let o = f.click(s, f.valve_seed).await.object;
    for k in 0..4 {
        f.correct(s, o, &nudge(k as f64)).await;
    }
    f.client.post(f.url(&format!("/sessions/{s}/objects/{o}/refit"))).send().await.unwrap();
    f.click(s, Point3::new(0.95, 0.1, 0.2)).await;
    let export: ExportResponse =
        f.client.get(f.url(&format!("/sessions/{s}/export"))).send().await.unwrap().json().await.unwrap();
    assert_eq!(export.report.objects.len(), 2);
    serde_json::to_string(&export).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn replayed_log_reproduces_export() {
    let f = fixture().await;
    let a = replay(&f).await;
    let b = replay(&f).await;
    assert_eq!(a, b);
    let g = fixture().await;
    assert_eq!(replay(&g).await, a);
    f.service.stop().await.unwrap();
    g.service.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn delete_removes_object() {
    let f = fixture().await;
    let s = f.new_session().await.session;
    let o = f.click(s, f.valve_seed).await.object;
    let r = f.client.delete(f.url(&format!("/sessions/{s}/objects/{o}"))).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.json::<RevisionResponse>().await.unwrap().revision, 2);
    let snap = f.state(s).await;
    assert!(snap.objects.is_empty());
    assert_eq!(snap.active_object, None);
    f.service.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_closes_event_streams() {
    let f = fixture().await;
    let s = f.new_session().await.session;
    let events = f.client.get(f.url(&format!("/sessions/{s}/events"))).send().await.unwrap();
    assert_eq!(events.status(), StatusCode::OK);
    tokio::time::timeout(Duration::from_secs(10), f.service.stop()).await.expect("graceful stop").unwrap();
    drop(events);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn port_in_use_is_reported() {
    let (st, _) = state(0.2);
    let first = RunningService::start(Arc::clone(&st), "127.0.0.1", 0).await.unwrap();
    let port = first.addr.port();
    let second = RunningService::start(st, "127.0.0.1", port).await;
    assert!(matches!(second, Err(ServiceError::PortInUse(p)) if p == port));
    first.stop().await.unwrap();
}
