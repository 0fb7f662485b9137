//! HTTP API used by the layout editor.
//!
//! | method | path | body → response |
//! |---|---|---|
//! | POST | `/api/jobs` | `{layout, overrides?}` → `{id}` |
//! | GET | `/api/jobs/{id}` | → job record |
//! | GET | `/api/jobs/{id}/image` | → PNG |
//! | GET | `/api/jobs/{id}/objects/{oid}/image` | → PNG |
//! | POST | `/api/jobs/{id}/objects/{oid}/regenerate` | `{seed?}` → `{id}` |
//! | GET | `/api/health` | → `{status}` |
//!
//! `layout` is a layout document with inline run-length masks; `overrides`
//! maps dotted config keys to values. Errors are `{code, stage, message}`.
//! Jobs run on a bounded pool and never modify a finished job's directory.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::config::EngineConfig;
use crate::engine::{new_job_id, Engine, Progress};
use crate::error::{PipelineError, Stage};
use crate::layout::{load_layout, Layout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub stage: Option<Stage>,
    pub message: String,
    #[serde(skip)]
    status: u16,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, stage: Option<Stage>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            stage,
            message: message.into(),
            status: status.as_u16(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", None, what)
    }
}

impl From<&PipelineError> for ApiError {
    fn from(e: &PipelineError) -> Self {
        let status = if e.is_validation() {
            StatusCode::BAD_REQUEST
        } else if matches!(e, PipelineError::NotFound(_)) {
            StatusCode::NOT_FOUND
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        Self::new(status, e.code(), Some(e.stage()), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectProgress {
    pub id: String,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub state: JobState,
    /// Current stage while running: `sog` or `cc`.
    pub stage: Option<Stage>,
    pub objects: Vec<ObjectProgress>,
    /// Paths relative to the job directory, filled once done.
    pub artifacts: BTreeMap<String, String>,
    /// Job this one was regenerated from.
    pub parent: Option<String>,
    pub error: Option<ApiError>,
}

impl JobRecord {
    fn queued(id: &str, layout: &Layout, parent: Option<String>) -> Self {
        Self {
            id: id.to_string(),
            state: JobState::Queued,
            stage: None,
            objects: layout
                .objects
                .iter()
                .map(|o| ObjectProgress {
                    id: o.id.clone(),
                    done: false,
                })
                .collect(),
            artifacts: BTreeMap::new(),
            parent,
            error: None,
        }
    }

    /// Applies a progress event; stages only move forward.
    fn advance(&mut self, p: &Progress) {
        if self.state > JobState::Running {
            return;
        }
        self.state = JobState::Running;
        match p {
            Progress::Stage(s) => {
                let rank = |s: Option<Stage>| match s {
                    None => 0,
                    Some(Stage::Sog) => 1,
                    Some(_) => 2,
                };
                if rank(Some(*s)) >= rank(self.stage) {
                    self.stage = Some(*s);
                }
            }
            Progress::ObjectDone(id) => {
                if let Some(o) = self.objects.iter_mut().find(|o| o.id == *id) {
                    o.done = true;
                }
            }
        }
    }
}

pub struct AppState {
    base: EngineConfig,
    out_root: PathBuf,
    jobs: Mutex<HashMap<String, JobRecord>>,
    permits: Arc<Semaphore>,
}

impl AppState {
    /// Jobs are written under `out_root`; at most `base.worker_count()` run
    /// at once (one if any backend is serialized).
    pub fn new(base: EngineConfig, out_root: PathBuf) -> Arc<Self> {
        let permits = base.worker_count().max(1);
        Arc::new(Self {
            base,
            out_root,
            jobs: Mutex::new(HashMap::new()),
            permits: Arc::new(Semaphore::new(permits)),
        })
    }

    fn record(&self, id: &str) -> Result<JobRecord, ApiError> {
        self.jobs
            .lock()
            .expect("job table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("job {id:?}")))
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) {
        if let Some(r) = self.jobs.lock().expect("job table").get_mut(id) {
            f(r);
        }
    }

    fn job_dir(&self, id: &str) -> PathBuf {
        self.out_root.join(id)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/jobs", post(create_job))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/image", get(scene_image))
        .route("/api/jobs/{id}/objects/{oid}/image", get(object_image))
        .route("/api/jobs/{id}/objects/{oid}/regenerate", post(regenerate))
        .with_state(state)
}

pub async fn serve(addr: &str, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "backends": state.base.backends }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateJob {
    layout: serde_json::Value,
    #[serde(default)]
    overrides: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JobCreated {
    id: String,
}

fn bad_request(e: PipelineError) -> ApiError {
    let mut api = ApiError::from(&e);
    api.status = StatusCode::BAD_REQUEST.as_u16();
    api
}

/// Mask paths would be resolved on the server's filesystem.
fn reject_mask_paths(layout: &serde_json::Value) -> Result<(), ApiError> {
    let objects = layout.get("objects").and_then(|o| o.as_array());
    for (i, o) in objects.into_iter().flatten().enumerate() {
        if o.get("mask").is_some_and(|m| m.is_string()) {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "validation_error",
                Some(Stage::Layout),
                format!("objects[{i}].mask: only inline run-length masks are accepted"),
            ));
        }
    }
    Ok(())
}

async fn create_job(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateJob>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<JobCreated>), ApiError> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", None, e.body_text()))?;
    reject_mask_paths(&body.layout)?;
    let bytes = serde_json::to_vec(&body.layout).expect("json value serializes");
    let layout = load_layout(&bytes, None).map_err(|e| bad_request(e.into()))?;
    let overrides = body
        .overrides
        .into_iter()
        .map(|(k, v)| {
            toml::Value::try_from(v)
                .map(|v| (k.clone(), v))
                .map_err(|e| PipelineError::Config(format!("{k}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(bad_request)?;
    let config = state.base.with_overrides(overrides).map_err(bad_request)?;
    let engine = Engine::new(config).map_err(bad_request)?;
    engine.preflight(&layout).map_err(bad_request)?;

    let id = new_job_id();
    state
        .jobs
        .lock()
        .expect("job table")
        .insert(id.clone(), JobRecord::queued(&id, &layout, None));
    spawn_job(state, id.clone(), move |engine_state, job_id, sink| {
        engine.run_job(&layout, &engine_state.job_dir(job_id), Some(sink)).map(|_| ())
    });
    Ok((StatusCode::ACCEPTED, Json(JobCreated { id })))
}

type JobFn = dyn FnOnce(&AppState, &str, &(dyn Fn(Progress) + Sync)) -> Result<(), PipelineError> + Send;

fn spawn_job(
    state: Arc<AppState>,
    id: String,
    work: impl FnOnce(&AppState, &str, &(dyn Fn(Progress) + Sync)) -> Result<(), PipelineError> + Send + 'static,
) {
    let work: Box<JobFn> = Box::new(work);
    tokio::spawn(async move {
        let Ok(_permit) = state.permits.clone().acquire_owned().await else {
            return;
        };
        let st = state.clone();
        let job_id = id.clone();
        let result = tokio::task::spawn_blocking(move || {
            let sink = |p: Progress| st.update(&job_id, |r| r.advance(&p));
            work(&st, &job_id, &sink)
        })
        .await;
        let result = match result {
            Ok(r) => r,
            Err(e) => Err(PipelineError::Config(format!("job panicked: {e}"))),
        };
        state.update(&id, |r| match result {
            Ok(()) => {
                r.state = JobState::Done;
                r.artifacts.insert("scene".into(), "scene.png".into());
                r.artifacts.insert("provenance".into(), "provenance.json".into());
                for o in r.objects.iter_mut() {
                    o.done = true;
                }
                let objs: Vec<String> = r.objects.iter().map(|o| o.id.clone()).collect();
                for oid in objs {
                    r.artifacts
                        .insert(format!("objects/{oid}"), format!("objects/{oid}/image.png"));
                }
            }
            Err(e) => {
                log::error!("job {id} failed: {e}");
                r.state = JobState::Failed;
                r.error = Some(ApiError::from(&e));
            }
        });
    });
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<JobRecord>, ApiError> {
    state.record(&id).map(Json)
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn finished(state: &AppState, id: &str) -> Result<JobRecord, ApiError> {
    let rec = state.record(id)?;
    if rec.state != JobState::Done {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "not_ready",
            rec.stage,
            format!("job {id} is {:?}", rec.state),
        ));
    }
    Ok(rec)
}

async fn scene_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    finished(&state, &id)?;
    let path = state.job_dir(&id).join("scene.png");
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::from(&PipelineError::io(&path, e)))?;
    Ok(png(bytes))
}

async fn object_image(
    State(state): State<Arc<AppState>>,
    Path((id, oid)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let rec = finished(&state, &id)?;
    if !rec.objects.iter().any(|o| o.id == oid) {
        return Err(ApiError::not_found(format!("object {oid:?} in job {id}")));
    }
    let path = state.job_dir(&id).join("objects").join(&oid).join("image.png");
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::from(&PipelineError::io(&path, e)))?;
    Ok(png(bytes))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegenerateBody {
    seed: Option<u64>,
}

async fn regenerate(
    State(state): State<Arc<AppState>>,
    Path((id, oid)): Path<(String, String)>,
    body: Option<Json<RegenerateBody>>,
) -> Result<(StatusCode, Json<JobCreated>), ApiError> {
    let rec = finished(&state, &id)?;
    if !rec.objects.iter().any(|o| o.id == oid) {
        return Err(ApiError::not_found(format!("object {oid:?} in job {id}")));
    }
    let seed = body.and_then(|Json(b)| b.seed);
    let src = state.job_dir(&id);
    let layout = crate::layout::load_layout_file(&src.join("layout.json"))
        .map_err(|e| ApiError::from(&PipelineError::from(e)))?;
    let engine = Engine::from_job(&src).map_err(|e| ApiError::from(&e))?;

    let new_id = new_job_id();
    state
        .jobs
        .lock()
        .expect("job table")
        .insert(new_id.clone(), JobRecord::queued(&new_id, &layout, Some(id.clone())));
    spawn_job(state, new_id.clone(), move |st, job_id, sink| {
        engine
            .regenerate_job(&src, &oid, seed, &st.job_dir(job_id), Some(sink))
            .map(|_| ())
    });
    Ok((StatusCode::ACCEPTED, Json(JobCreated { id: new_id })))
}
