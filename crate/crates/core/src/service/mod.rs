//! Asynchronous editing service.
//!
//! | route | |
//! |---|---|
//! | `POST /v1/edits` | multipart `image` + `body` JSON → `202 {job_id}` |
//! | `GET /v1/edits/{id}` | job record, with `result_url` once done |
//! | `GET /v1/edits/{id}/result` | edited PNG |
//! | `POST /v1/exemplars` | multipart `image` → `201 {exemplar_id}` |
//! | `GET /v1/styles` | styles known to the server |
//!
//! Jobs are files under `<data_dir>/jobs`; pending ones are re-queued when
//! the service starts.

mod jobs;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;

pub use jobs::{EditJob, JobStatus, JobStore};

use crate::editing::{GuidanceConfig, ModelEditor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::instruction::{bind, parse_template, BoundInstruction, ExemplarRef, ScaleWeights};
use crate::refinery::StyleSpec;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

/// Editing with per-request guidance scales.
pub trait GuidedEditor: Send + Sync {
    fn edit_guided(&self, image: &Image, instruction: &BoundInstruction, guidance: &GuidanceConfig, seed: u64) -> Result<Image>;
}

impl GuidedEditor for ModelEditor {
    fn edit_guided(&self, image: &Image, instruction: &BoundInstruction, guidance: &GuidanceConfig, seed: u64) -> Result<Image> {
        self.model.sample_edit(image, instruction, guidance, self.steps, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub bind: String,
    pub workers: usize,
    /// Jobs waiting beyond this many are refused with 503.
    pub queue_bound: usize,
    pub max_image_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("stylebooth-data"),
            bind: "127.0.0.1:8080".into(),
            workers: 2,
            queue_bound: 64,
            max_image_bytes: 8 << 20,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// `STYLEBOOTH_DATA_DIR` and `STYLEBOOTH_BIND` override the file.
    pub fn with_env(mut self) -> Self {
        if let Ok(d) = std::env::var("STYLEBOOTH_DATA_DIR") {
            self.data_dir = d.into();
        }
        if let Ok(b) = std::env::var("STYLEBOOTH_BIND") {
            self.bind = b;
        }
        self
    }

    fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.queue_bound == 0 || self.max_image_bytes == 0 {
            return Err(Error::Config("workers, queue_bound and max_image_bytes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct AppState {
    store: Arc<JobStore>,
    queue: mpsc::Sender<String>,
    styles: Arc<Vec<StyleSpec>>,
    max_image_bytes: usize,
}

/// A running service: router plus the worker pool behind it.
pub struct Service {
    pub router: Router,
    pub store: Arc<JobStore>,
    /// Ids re-queued from a previous process.
    pub recovered: Vec<String>,
}

/// Opens the job store, starts workers and builds the router. Must run
/// inside a tokio runtime.
pub fn start(cfg: &ServiceConfig, editor: Arc<dyn GuidedEditor>, styles: Vec<StyleSpec>) -> Result<Service> {
    cfg.validate()?;
    let (store, recovered) = JobStore::open(&cfg.data_dir)?;
    let store = Arc::new(store);
    let (tx, rx) = mpsc::channel::<String>(cfg.queue_bound);
    let rx = Arc::new(tokio::sync::Mutex::new(rx));
    for _ in 0..cfg.workers {
        let rx = rx.clone();
        let store = store.clone();
        let editor = editor.clone();
        tokio::spawn(async move {
            loop {
                let next = rx.lock().await.recv().await;
                let Some(id) = next else { break };
                run_job(&store, editor.clone(), &id).await;
            }
        });
    }
    {
        let tx = tx.clone();
        let ids = recovered.clone();
        tokio::spawn(async move {
            for id in ids {
                if tx.send(id).await.is_err() {
                    break;
                }
            }
        });
    }
    let state = AppState {
        store: store.clone(),
        queue: tx,
        styles: Arc::new(styles),
        max_image_bytes: cfg.max_image_bytes,
    };
    let router = Router::new()
        .route("/v1/edits", post(submit_edit))
        .route("/v1/edits/{id}", get(get_edit))
        .route("/v1/edits/{id}/result", get(get_result))
        .route("/v1/exemplars", post(upload_exemplar))
        .route("/v1/styles", get(list_styles))
        .route("/healthz", get(|| async { "ok" }))
        .layer(DefaultBodyLimit::max(cfg.max_image_bytes + (256 << 10)))
        .with_state(state);
    Ok(Service { router, store, recovered })
}

/// Binds `cfg.bind` and serves until ctrl-c.
pub async fn serve(cfg: ServiceConfig, editor: Arc<dyn GuidedEditor>, styles: Vec<StyleSpec>) -> Result<()> {
    let service = start(&cfg, editor, styles)?;
    let listener = tokio::net::TcpListener::bind(&cfg.bind)
        .await
        .map_err(|e| Error::io(&cfg.bind, e))?;
    tracing::info!(addr = %cfg.bind, recovered = service.recovered.len(), "serving");
    axum::serve(listener, service.router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(&cfg.bind, e))
}

fn exemplar_path(root: &Path, id: &str) -> PathBuf {
    root.join("exemplars").join(format!("{id}.png"))
}

fn bound_for(job: &EditJob, root: &Path) -> Result<BoundInstruction> {
    let refs = job
        .exemplar_ids
        .iter()
        .map(|id| ExemplarRef::from_path(id.clone(), exemplar_path(root, id)))
        .collect();
    bind(
        parse_template(&job.instruction)?,
        job.styles.clone(),
        refs,
        ScaleWeights::new(job.alphas.clone())?,
    )
}

fn guidance_for(job: &EditJob) -> GuidanceConfig {
    GuidanceConfig {
        image_scale: job.s_image,
        text_scale: job.s_text,
        ..GuidanceConfig::default()
    }
}

async fn run_job(store: &Arc<JobStore>, editor: Arc<dyn GuidedEditor>, id: &str) {
    let job = match store.transition(id, JobStatus::Running, None, None) {
        Ok(j) => j,
        Err(e) => {
            tracing::warn!(job = id, error = %e, "cannot start job");
            return;
        }
    };
    let root = store.root().to_path_buf();
    let outcome = tokio::task::spawn_blocking(move || -> Result<String> {
        let image = Image::load(&root.join(&job.original))?;
        let bound = bound_for(&job, &root)?;
        let out = editor.edit_guided(&image, &bound, &guidance_for(&job), job.seed)?;
        let rel = format!("results/{}.png", job.id);
        out.save_png(&root.join(&rel))?;
        Ok(rel)
    })
    .await
    .unwrap_or_else(|e| Err(Error::Backend(format!("worker panicked: {e}"))));
    let r = match outcome {
        Ok(rel) => store.transition(id, JobStatus::Done, Some(rel), None),
        Err(e) => store.transition(id, JobStatus::Failed, None, Some(e.to_string())),
    };
    if let Err(e) = r {
        tracing::error!(job = id, error = %e, "cannot record job outcome");
    }
}

struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": kind, "message": message.into() }),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Parse { offset, .. } => Self {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": "parse", "message": message, "offset": offset }),
            },
            Error::Binding { kind, expected, given } => Self {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": "arity", "message": message, "slot": kind, "expected": expected, "given": given }),
            },
            Error::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "not_found", message),
            e if e.is_usage() => Self::new(StatusCode::BAD_REQUEST, "invalid", message),
            Error::Image(_) => Self::new(StatusCode::BAD_REQUEST, "image", message),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Clone, Deserialize)]
struct SubmitBody {
    instruction: String,
    #[serde(default)]
    styles: Vec<String>,
    #[serde(default)]
    exemplar_ids: Vec<String>,
    #[serde(default)]
    alphas: Vec<f32>,
    #[serde(default = "default_s_image")]
    s_image: f64,
    #[serde(default = "default_s_text")]
    s_text: f64,
    #[serde(default)]
    seed: u64,
}

fn default_s_image() -> f64 {
    GuidanceConfig::default().image_scale
}

fn default_s_text() -> f64 {
    GuidanceConfig::default().text_scale
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    ApiError::new(e.status(), "multipart", e.body_text())
}

/// Reads the named parts of a multipart request.
async fn read_parts(mut mp: Multipart, max_image_bytes: usize) -> Result<(Option<Vec<u8>>, Option<String>), ApiError> {
    let mut image = None;
    let mut body = None;
    while let Some(field) = mp.next_field().await.map_err(multipart_error)? {
        match field.name().unwrap_or_default() {
            "image" => {
                let bytes = field.bytes().await.map_err(multipart_error)?;
                if bytes.len() > max_image_bytes {
                    return Err(ApiError::new(
                        StatusCode::PAYLOAD_TOO_LARGE,
                        "too_large",
                        format!("image is {} bytes; limit is {max_image_bytes}", bytes.len()),
                    ));
                }
                image = Some(bytes.to_vec());
            }
            "body" => body = Some(field.text().await.map_err(multipart_error)?),
            _ => {}
        }
    }
    Ok((image, body))
}

async fn submit_edit(State(st): State<AppState>, headers: HeaderMap, mp: Multipart) -> Result<Response, ApiError> {
    let key = headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    if let Some(job) = key.as_deref().and_then(|k| st.store.by_idempotency_key(k)) {
        return Ok((StatusCode::OK, Json(json!({ "job_id": job.id, "status": job.status, "replayed": true }))).into_response());
    }
    let (image, body) = read_parts(mp, st.max_image_bytes).await?;
    let body: SubmitBody = serde_json::from_str(
        &body.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "invalid", "missing `body` part"))?,
    )
    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid", e.to_string()))?;
    let bytes = image.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "invalid", "missing `image` part"))?;
    let original = Image::decode(&bytes)?;

    let id = uuid::Uuid::new_v4().to_string();
    let now = jobs::now_ms();
    let job = EditJob {
        id: id.clone(),
        original: format!("uploads/{id}.png"),
        instruction: body.instruction,
        styles: body.styles,
        exemplar_ids: body.exemplar_ids,
        alphas: body.alphas,
        s_image: body.s_image,
        s_text: body.s_text,
        seed: body.seed,
        status: JobStatus::Queued,
        result: None,
        error: None,
        idempotency_key: key,
        recovered: false,
        created_ms: now,
        updated_ms: now,
    };
    let root = st.store.root().to_path_buf();
    bound_for(&job, &root)?;
    if let Some(missing) = job.exemplar_ids.iter().find(|e| !exemplar_path(&root, e).exists()) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "unknown_exemplar", format!("exemplar `{missing}` was never uploaded")));
    }
    guidance_for(&job).validate()?;

    let permit = st
        .queue
        .try_reserve()
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "queue_full", "job queue is full"))?;
    original.save_png(&root.join(&job.original))?;
    let (job, fresh) = st.store.insert(job)?;
    if !fresh {
        return Ok((StatusCode::OK, Json(json!({ "job_id": job.id, "status": job.status, "replayed": true }))).into_response());
    }
    permit.send(job.id.clone());
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job.id, "status": job.status }))).into_response())
}

async fn get_edit(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let job = st
        .store
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("job `{id}`")))?;
    let mut v = serde_json::to_value(&job).map_err(Error::from)?;
    if job.status == JobStatus::Done {
        v["result_url"] = json!(format!("/v1/edits/{id}/result"));
    }
    Ok(Json(v))
}

async fn get_result(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let job = st
        .store
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("job `{id}`")))?;
    let Some(rel) = job.result.filter(|_| job.status == JobStatus::Done) else {
        return Err(ApiError::new(StatusCode::CONFLICT, "not_ready", format!("job `{id}` is {:?}", job.status)));
    };
    let path = st.store.root().join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn upload_exemplar(State(st): State<AppState>, mp: Multipart) -> Result<Response, ApiError> {
    let (image, _) = read_parts(mp, st.max_image_bytes).await?;
    let bytes = image.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "invalid", "missing `image` part"))?;
    let img = Image::decode(&bytes)?;
    let id = uuid::Uuid::new_v4().to_string();
    img.save_png(&exemplar_path(st.store.root(), &id))?;
    Ok((StatusCode::CREATED, Json(json!({ "exemplar_id": id })).into_response()).into_response())
}

async fn list_styles(State(st): State<AppState>) -> Json<serde_json::Value> {
    let styles: Vec<_> = st
        .styles
        .iter()
        .map(|s| json!({ "name": s.name, "expansion_format": s.expansion_format }))
        .collect();
    Json(json!({ "styles": styles }))
}
