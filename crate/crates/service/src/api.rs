use std::convert::Infallible;
use std::sync::Arc;

use artireg::engine::Session;
use artireg::geom::{Point3, Twist6};
use artireg::model::{ModelKind, TriMesh};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use futures_util::{Stream, StreamExt};
use nalgebra::Vector3;
use serde::Serialize;
use tokio_stream::wrappers::WatchStream;

use crate::session::SessionHandle;
use crate::wire::{
    CameraJson, CorrectionRequest, CycleResponse, ExportResponse, PointRequest, PointResponse, PoseJson,
    PoseResponse, RefitToggle, RevisionGuard, RevisionResponse, StateSnapshot,
};
use crate::{ApiError, AppState};

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = State<Arc<AppState>>;

pub(crate) fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{s}", get(get_session))
        .route("/sessions/{s}/scene", get(get_scene))
        .route("/sessions/{s}/models", get(get_models))
        .route("/sessions/{s}/points", post(add_point))
        .route("/sessions/{s}/objects/{o}", delete(delete_object))
        .route("/sessions/{s}/objects/{o}/correction", post(correct))
        .route("/sessions/{s}/objects/{o}/cycle", post(cycle))
        .route("/sessions/{s}/objects/{o}/refit", post(refit))
        .route("/sessions/{s}/refit-enabled", put(set_refit_enabled))
        .route("/sessions/{s}/camera", put(set_camera))
        .route("/sessions/{s}/export", get(export))
        .route("/sessions/{s}/events", get(events))
        .with_state(state)
}

async fn create_session(State(app): Shared) -> Result<(StatusCode, Json<StateSnapshot>), ApiError> {
    let id = app.allocate_id();
    let (scene, models, params) = (Arc::clone(&app.scene), Arc::clone(&app.models), app.params.clone());
    let session = tokio::task::spawn_blocking(move || Session::new(&scene, models.as_ref().clone(), params))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let handle = SessionHandle::spawn(id, session);
    let snapshot = handle.snapshot();
    app.insert(handle);
    Ok((StatusCode::CREATED, Json(snapshot.as_ref().clone())))
}

async fn get_session(State(app): Shared, Path(s): Path<u64>) -> ApiResult<StateSnapshot> {
    Ok(Json(app.session(s)?.snapshot().as_ref().clone()))
}

async fn get_scene(State(app): Shared, Path(s): Path<u64>) -> Result<impl IntoResponse, ApiError> {
    let h = app.session(s)?;
    let count = (h.scene_blob.len() / 12).to_string();
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (header::HeaderName::from_static("x-point-count"), count),
        ],
        h.scene_blob.clone(),
    ))
}

#[derive(Serialize)]
struct MeshJson {
    vertices: Vec<[f64; 3]>,
    triangles: Vec<[u32; 3]>,
}

impl MeshJson {
    fn new(m: &TriMesh) -> Self {
        Self {
            vertices: m.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            triangles: m.triangles.clone(),
        }
    }
}

#[derive(Serialize)]
struct JointJson {
    origin: [f64; 3],
    axis: [f64; 3],
    limits: [f64; 2],
}

/// Model geometry for rendering; `moving` is posed by rotating about the
/// joint by `theta`.
#[derive(Serialize)]
struct ModelJson {
    name: String,
    base: MeshJson,
    moving: Option<MeshJson>,
    joint: Option<JointJson>,
}

async fn get_models(State(app): Shared, Path(s): Path<u64>) -> ApiResult<Vec<ModelJson>> {
    app.session(s)?;
    let models = app
        .models
        .iter()
        .map(|m| match &m.kind {
            ModelKind::Static { mesh } => ModelJson {
                name: m.name.clone(),
                base: MeshJson::new(mesh),
                moving: None,
                joint: None,
            },
            ModelKind::Articulated { base, moving, joint } => {
                let (o, a) = (joint.origin(), joint.axis());
                ModelJson {
                    name: m.name.clone(),
                    base: MeshJson::new(base),
                    moving: Some(MeshJson::new(moving)),
                    joint: Some(JointJson {
                        origin: [o.x, o.y, o.z],
                        axis: [a.x, a.y, a.z],
                        limits: [joint.theta_min(), joint.theta_max()],
                    }),
                }
            }
        })
        .collect();
    Ok(Json(models))
}

async fn add_point(
    State(app): Shared,
    Path(s): Path<u64>,
    Query(guard): Query<RevisionGuard>,
    Json(req): Json<PointRequest>,
) -> ApiResult<PointResponse> {
    let [x, y, z] = req.point;
    let r = app
        .session(s)?
        .mutate(guard, move |inner, _| {
            let (id, action) = inner.session.add_search_point(Point3::new(x, y, z))?;
            let obj = inner.session.object(id)?;
            Ok(PointResponse::new(inner.session.revision(), action, obj))
        })
        .await?;
    Ok(Json(r))
}

async fn correct(
    State(app): Shared,
    Path((s, o)): Path<(u64, u64)>,
    Query(guard): Query<RevisionGuard>,
    Json(req): Json<CorrectionRequest>,
) -> ApiResult<PoseResponse> {
    if !req.timestamp.is_finite() {
        return Err(ApiError::Validation("timestamp must be finite".into()));
    }
    let r = app
        .session(s)?
        .mutate(guard, move |inner, now| {
            let model = inner.session.object(o)?.active().model.clone();
            if let Some(&last) = inner.last_sample.get(&o) {
                if req.timestamp <= last {
                    return Err(ApiError::StaleSample {
                        timestamp: req.timestamp,
                        last,
                    });
                }
            }
            let twist = Twist6::new(Vector3::from(req.linear), Vector3::from(req.angular));
            let result = inner.session.apply_correction(o, &twist, req.delta_theta, req.dt, now)?;
            inner.last_sample.insert(o, req.timestamp);
            Ok(PoseResponse::new(inner.session.revision(), o, model, &result))
        })
        .await?;
    Ok(Json(r))
}

async fn cycle(
    State(app): Shared,
    Path((s, o)): Path<(u64, u64)>,
    Query(guard): Query<RevisionGuard>,
) -> ApiResult<CycleResponse> {
    let r = app
        .session(s)?
        .mutate(guard, move |inner, _| {
            let active_model = inner.session.cycle_model(o)?;
            Ok(CycleResponse {
                revision: inner.session.revision(),
                object: o,
                active_model,
            })
        })
        .await?;
    Ok(Json(r))
}

async fn refit(
    State(app): Shared,
    Path((s, o)): Path<(u64, u64)>,
    Query(guard): Query<RevisionGuard>,
) -> ApiResult<PoseResponse> {
    let r = app
        .session(s)?
        .mutate(guard, move |inner, _| {
            let result = inner.session.refit_now(o)?;
            let model = inner.session.object(o)?.active().model.clone();
            Ok(PoseResponse::new(inner.session.revision(), o, model, &result))
        })
        .await?;
    Ok(Json(r))
}

async fn delete_object(
    State(app): Shared,
    Path((s, o)): Path<(u64, u64)>,
    Query(guard): Query<RevisionGuard>,
) -> ApiResult<RevisionResponse> {
    let r = app
        .session(s)?
        .mutate(guard, move |inner, _| {
            inner.session.delete_object(o)?;
            inner.last_sample.remove(&o);
            Ok(RevisionResponse {
                revision: inner.session.revision(),
            })
        })
        .await?;
    Ok(Json(r))
}

async fn set_refit_enabled(
    State(app): Shared,
    Path(s): Path<u64>,
    Query(guard): Query<RevisionGuard>,
    Json(req): Json<RefitToggle>,
) -> ApiResult<RevisionResponse> {
    let r = app
        .session(s)?
        .mutate(guard, move |inner, _| {
            inner.session.set_refit_enabled(req.enabled);
            Ok(RevisionResponse {
                revision: inner.session.revision(),
            })
        })
        .await?;
    Ok(Json(r))
}

async fn set_camera(
    State(app): Shared,
    Path(s): Path<u64>,
    Query(guard): Query<RevisionGuard>,
    Json(req): Json<CameraJson>,
) -> ApiResult<RevisionResponse> {
    let pose = PoseJson {
        position: req.position,
        orientation: req.orientation,
        theta: 0.0,
    }
    .to_transform()
    .ok_or_else(|| ApiError::Validation("camera pose must be finite with a nonzero quaternion".into()))?;
    let r = app
        .session(s)?
        .mutate(guard, move |inner, _| {
            inner.session.set_camera_pose(pose)?;
            Ok(RevisionResponse {
                revision: inner.session.revision(),
            })
        })
        .await?;
    Ok(Json(r))
}

async fn export(State(app): Shared, Path(s): Path<u64>) -> ApiResult<ExportResponse> {
    let r = app.session(s)?.read(|inner| ExportResponse {
        revision: inner.session.revision(),
        report: inner.session.export_fits(),
    });
    Ok(Json(r))
}

/// Snapshot stream. The current snapshot is sent on connect; a slow client
/// skips intermediate snapshots but always receives the latest.
async fn events(
    State(app): Shared,
    Path(s): Path<u64>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let h = app.session(s)?;
    let mut shutdown = app.shutdown.subscribe();
    let stop = async move {
        let _ = shutdown.wait_for(|&down| down).await;
    };
    let stream = WatchStream::new(h.subscribe())
        .map(|snap| {
            let event = Event::default()
                .event("snapshot")
                .id(snap.revision.to_string())
                .json_data(snap.as_ref())
                .expect("snapshots serialize");
            Ok(event)
        })
        .take_until(stop);
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
