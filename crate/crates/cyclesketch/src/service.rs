//! HTTP service for the sketch studio.
//!
//! Requests are handled concurrently; training runs on one dedicated worker
//! thread that takes jobs in FIFO order. Every JSON payload carries
//! `"v": 1`.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cyclesketch_core::train::{LossTerms, TrainObserver};
use cyclesketch_core::{CameraModel, IntegratorConfig, Method, PointSet2, Region2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{load_model, save_model, ModelCheckpoint};
use crate::error::AppError;
use crate::formats::{sketch_points, CameraJson, ConfigJson, PlaneJson, RunConfig, SketchPointJson, Target, SCHEMA_VERSION};
use crate::pipeline;

/// Jobs allowed to wait behind the running one.
pub const QUEUE_DEPTH: usize = 8;
/// Training progress is published every this many epochs.
pub const PROGRESS_EVERY: usize = 10;
/// Loss entries kept in a job's history tail.
pub const HISTORY_TAIL: usize = 50;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id:?}"))
    }
}

impl From<cyclesketch_core::Error> for ApiError {
    fn from(e: cyclesketch_core::Error) -> Self {
        let status = if e.is_numerical() { StatusCode::UNPROCESSABLE_ENTITY } else { StatusCode::BAD_REQUEST };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "v": SCHEMA_VERSION, "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct LossPoint {
    epoch: usize,
    total: f64,
    hausdorff: f64,
    regularizer: f64,
}

#[derive(Debug, Clone)]
struct Job {
    state: JobState,
    sketch_id: String,
    config: RunConfig,
    epoch: usize,
    history: VecDeque<LossPoint>,
    model_id: Option<String>,
    error: Option<String>,
}

#[derive(Default)]
struct Store {
    next_id: u64,
    sketches: HashMap<String, Target>,
    jobs: HashMap<String, Job>,
    models: HashMap<String, Arc<ModelCheckpoint>>,
}

impl Store {
    fn fresh_id(&mut self, prefix: &str) -> String {
        self.next_id += 1;
        format!("{prefix}-{}", self.next_id)
    }

    fn queued(&self) -> usize {
        self.jobs.values().filter(|j| j.state == JobState::Queued).count()
    }
}

struct Shared {
    store: RwLock<Store>,
    models_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
    jobs: mpsc::Sender<String>,
}

impl AppState {
    /// Starts the training worker. Models are also written to `models_dir`
    /// when given, and any models already there are loaded.
    pub fn new(models_dir: Option<PathBuf>) -> Result<Self, AppError> {
        let mut store = Store::default();
        if let Some(dir) = &models_dir {
            std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
            load_existing(dir, &mut store)?;
        }
        let shared = Arc::new(Shared { store: RwLock::new(store), models_dir });
        let (tx, rx) = mpsc::channel::<String>();
        let worker = Arc::clone(&shared);
        std::thread::Builder::new()
            .name("trainer".into())
            .spawn(move || {
                for job_id in rx {
                    run_job(&worker, &job_id);
                }
            })
            .map_err(|e| AppError::Input(format!("cannot start training worker: {e}")))?;
        Ok(Self { shared, jobs: tx })
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Store> {
        self.shared.store.read().expect("store lock poisoned")
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Store> {
        self.shared.store.write().expect("store lock poisoned")
    }

    fn model(&self, id: &str) -> ApiResult<Arc<ModelCheckpoint>> {
        self.read().models.get(id).cloned().ok_or_else(|| ApiError::not_found("model", id))
    }
}

fn load_existing(dir: &Path, store: &mut Store) -> Result<(), AppError> {
    let entries = std::fs::read_dir(dir).map_err(|e| AppError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let ckpt = load_model(&path)?;
        if let Some(n) = id.strip_prefix("model-").and_then(|n| n.parse::<u64>().ok()) {
            store.next_id = store.next_id.max(n);
        }
        store.models.insert(id.to_string(), Arc::new(ckpt));
    }
    Ok(())
}

struct JobObserver<'a> {
    shared: &'a Shared,
    job_id: &'a str,
}

impl TrainObserver for JobObserver<'_> {
    fn on_epoch(&mut self, epoch: usize, loss: &LossTerms) {
        if epoch % PROGRESS_EVERY != 0 {
            return;
        }
        let mut store = self.shared.store.write().expect("store lock poisoned");
        if let Some(job) = store.jobs.get_mut(self.job_id) {
            job.epoch = epoch;
            job.history.push_back(LossPoint {
                epoch,
                total: loss.total,
                hausdorff: loss.hausdorff,
                regularizer: loss.regularizer,
            });
            while job.history.len() > HISTORY_TAIL {
                job.history.pop_front();
            }
        }
    }
}

fn run_job(shared: &Shared, job_id: &str) {
    let inputs = {
        let mut store = shared.store.write().expect("store lock poisoned");
        let Some(job) = store.jobs.get(job_id) else { return };
        let (sketch_id, config) = (job.sketch_id.clone(), job.config.clone());
        let target = store.sketches.get(&sketch_id).cloned();
        if let Some(job) = store.jobs.get_mut(job_id) {
            job.state = JobState::Running;
        }
        target.map(|t| (t, config))
    };
    let outcome = match inputs {
        Some((target, config)) => {
            let mut observer = JobObserver { shared, job_id };
            pipeline::train_model(&target, &config, &mut observer).map_err(|e| e.to_string())
        }
        None => Err("sketch disappeared".to_string()),
    };
    let outcome = outcome.and_then(|ckpt| {
        let model_id = shared.store.write().expect("store lock poisoned").fresh_id("model");
        if let Some(dir) = &shared.models_dir {
            save_model(&ckpt, &dir.join(format!("{model_id}.json"))).map_err(|e| e.to_string())?;
        }
        Ok((model_id, ckpt))
    });
    let mut store = shared.store.write().expect("store lock poisoned");
    match outcome {
        Ok((model_id, ckpt)) => {
            let epochs = ckpt.training.epochs;
            store.models.insert(model_id.clone(), Arc::new(ckpt));
            if let Some(job) = store.jobs.get_mut(job_id) {
                job.state = JobState::Done;
                job.epoch = epochs;
                job.model_id = Some(model_id);
            }
        }
        Err(message) => {
            if let Some(job) = store.jobs.get_mut(job_id) {
                job.state = JobState::Failed;
                job.error = Some(message);
            }
        }
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed JSON: {e}")))?;
    match value.get("v").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(ApiError::bad_request(format!("unsupported schema version {v}"))),
        None => return Err(ApiError::bad_request("missing schema version \"v\"")),
    }
    serde_json::from_value(value).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SketchRequest {
    #[allow(dead_code)]
    v: u32,
    points: Vec<SketchPointJson>,
    camera: Option<CameraJson>,
    plane: Option<PlaneJson>,
}

async fn post_sketch(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: SketchRequest = parse_body(&body)?;
    if req.points.len() < PointSet2::MIN_POINTS {
        return Err(ApiError::bad_request("a sketch needs at least 3 points"));
    }
    let camera = match &req.camera {
        Some(c) => c.to_model()?,
        None => CameraModel::overhead(),
    };
    let (plane, hint) = req.plane.unwrap_or_else(PlaneJson::ground).to_model()?;
    let sketch = sketch_points(&req.points)?;
    let target = pipeline::project(&camera, &sketch, &plane, hint)?;
    let preview = target.plane_points().into_inner();
    let transform = crate::formats::TransformJson::from(target.transform);
    let id = {
        let mut store = app.write();
        let id = store.fresh_id("sketch");
        store.sketches.insert(id.clone(), target);
        id
    };
    let body = json!({ "v": SCHEMA_VERSION, "sketch_id": id, "preview": preview, "shape_transform": transform });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    #[allow(dead_code)]
    v: u32,
    sketch_id: String,
    #[serde(default)]
    config: ConfigJson,
}

async fn post_train(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: TrainRequest = parse_body(&body)?;
    let config = req.config.resolve()?;
    let job_id = {
        let mut store = app.write();
        if !store.sketches.contains_key(&req.sketch_id) {
            return Err(ApiError::not_found("sketch", &req.sketch_id));
        }
        if store.queued() >= QUEUE_DEPTH {
            return Err(ApiError::new(StatusCode::CONFLICT, "training queue is full"));
        }
        let id = store.fresh_id("job");
        store.jobs.insert(
            id.clone(),
            Job {
                state: JobState::Queued,
                sketch_id: req.sketch_id,
                config,
                epoch: 0,
                history: VecDeque::new(),
                model_id: None,
                error: None,
            },
        );
        id
    };
    app.jobs
        .send(job_id.clone())
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "training worker stopped"))?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "v": SCHEMA_VERSION, "job_id": job_id }))).into_response())
}

async fn get_job(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let store = app.read();
    let job = store.jobs.get(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    let loss = job.history.back().map(|l| l.total);
    let body = json!({
        "v": SCHEMA_VERSION,
        "id": id,
        "state": job.state,
        "epoch": job.epoch,
        "epochs": job.config.train.epochs,
        "loss": loss,
        "loss_tail": job.history,
        "model_id": job.model_id,
        "error": job.error,
    });
    Ok(Json(body).into_response())
}

#[derive(Deserialize)]
struct CycleQuery {
    k: Option<usize>,
}

async fn get_cycle(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<CycleQuery>,
) -> ApiResult<Response> {
    let model = app.model(&id)?;
    let k = q.k.unwrap_or(256);
    let points = blocking(move || Ok(pipeline::cycle(&model, k)?)).await?;
    Ok(Json(json!({ "v": SCHEMA_VERSION, "points": points })).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RolloutRequest {
    #[allow(dead_code)]
    v: u32,
    start: [f64; 3],
    #[serde(default = "default_duration")]
    duration: f64,
    #[serde(default = "default_step")]
    step: f64,
    #[serde(default = "default_method")]
    method: String,
}

fn default_duration() -> f64 {
    50.0
}

fn default_step() -> f64 {
    1e-3
}

fn default_method() -> String {
    "rk4".into()
}

async fn post_rollout(State(app): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Response> {
    let model = app.model(&id)?;
    let req: RolloutRequest = parse_body(&body)?;
    let method = Method::from_name(&req.method)
        .ok_or_else(|| ApiError::bad_request(format!("unknown method {:?}", req.method)))?;
    let cfg = IntegratorConfig::new(method, req.step, req.duration)?;
    if !req.start.iter().all(|c| c.is_finite()) {
        return Err(ApiError::bad_request("start must be finite"));
    }
    let traj = blocking(move || Ok(pipeline::rollout(&model, req.start, &cfg)?)).await?;
    Ok(Json(pipeline::TrajectoryJson::from(&traj)).into_response())
}

#[derive(Deserialize)]
struct FieldQuery {
    region: Option<String>,
    res: Option<usize>,
}

async fn get_field(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FieldQuery>,
) -> ApiResult<Response> {
    let model = app.model(&id)?;
    let res = q.res.unwrap_or(20);
    if res == 0 || res > 500 {
        return Err(ApiError::bad_request("res must lie in 1..=500"));
    }
    let region = match &q.region {
        Some(text) => {
            let v: Vec<f64> = text
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| ApiError::bad_request("region must be \"x0,z0,x1,z1\""))?;
            if v.len() != 4 {
                return Err(ApiError::bad_request("region must be \"x0,z0,x1,z1\""));
            }
            Some(Region2::new([v[0], v[1]], [v[2], v[3]])?)
        }
        None => None,
    };
    let samples = blocking(move || {
        let region = match region {
            Some(r) => r,
            None => Region2::inflated_bounds(&PointSet2::new(pipeline::cycle(&model, 256)?)?, 0.5),
        };
        Ok(pipeline::field(&model, &region, res)?)
    })
    .await?;
    let samples: Vec<_> = samples.iter().map(|s| json!({ "x": s.x, "z": s.z, "vx": s.vx, "vz": s.vz })).collect();
    Ok(Json(json!({ "v": SCHEMA_VERSION, "resolution": res, "samples": samples })).into_response())
}

async fn no_studio() -> impl IntoResponse {
    (StatusCode::NOT_FOUND, "no studio bundle configured; start the service with --static DIR")
}

pub fn router(app: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sketches", post(post_sketch))
        .route("/train", post(post_train))
        .route("/jobs/{id}", get(get_job))
        .route("/models/{id}/cycle", get(get_cycle))
        .route("/models/{id}/rollout", post(post_rollout))
        .route("/models/{id}/field", get(get_field))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.route("/", get(no_studio)),
    }
}

pub async fn serve(port: u16, static_dir: Option<PathBuf>, models_dir: Option<PathBuf>) -> Result<(), AppError> {
    let app = AppState::new(models_dir)?;
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| AppError::Input(format!("{addr}: {e}")))?;
    eprintln!("listening on http://{addr}");
    axum::serve(listener, router(app, static_dir)).await.map_err(|e| AppError::Input(e.to_string()))
}
