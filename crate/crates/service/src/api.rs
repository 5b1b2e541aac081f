use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nnaug_core::dedup::Verdict;
use serde::Deserialize;
use serde_json::{json, Value};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use crate::jobs::{JobError, JobManager, JobRequest, DATASETS_DIR};
use crate::pipeline::valid_dataset_id;
use crate::store::{StoreError, VerdictStore};

pub const IMAGES_DIR: &str = "images";
const MAX_PAGE: usize = 10_000;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<RwLock<VerdictStore>>,
    pub jobs: JobManager,
    pub dir: PathBuf,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownPair(_) => Self::new(StatusCode::NOT_FOUND, "UnknownPair", e.to_string()),
            StoreError::InvalidVerdict => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidVerdict", e.to_string()),
            StoreError::Report(_) => Self::new(StatusCode::CONFLICT, "ReportUnavailable", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()),
        }
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        match e {
            JobError::BadParams(_) => Self::new(StatusCode::BAD_REQUEST, "BadParams", e.to_string()),
            JobError::UnknownJob(_) => Self::new(StatusCode::NOT_FOUND, "UnknownJob", e.to_string()),
            JobError::Io(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/jobs", post(submit_job).get(list_jobs))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/pairs", get(next_pairs))
        .route("/v1/pairs/{key}/verdict", post(post_verdict))
        .route("/v1/reports/leakage", get(leakage))
        .route("/v1/datasets/{id}/manifest", get(manifest))
        .route("/v1/images/{*id}", get(image))
        .with_state(state)
}

async fn submit_job(State(s): State<AppState>, Json(body): Json<Value>) -> Result<Response, ApiError> {
    let req: JobRequest =
        serde_json::from_value(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadParams", e.to_string()))?;
    let (job, created) = s.jobs.submit(req)?;
    let status = if created { StatusCode::ACCEPTED } else { StatusCode::OK };
    Ok((status, Json(job)).into_response())
}

async fn list_jobs(State(s): State<AppState>) -> Response {
    Json(s.jobs.list()).into_response()
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(s.jobs.get(&id)?).into_response())
}

#[derive(Deserialize)]
struct PairQuery {
    status: Option<String>,
    limit: Option<usize>,
}

fn parse_verdict(s: &str) -> Option<Verdict> {
    serde_json::from_value(Value::String(s.to_string())).ok()
}

async fn next_pairs(State(s): State<AppState>, Query(q): Query<PairQuery>) -> Result<Response, ApiError> {
    let status = match q.status.as_deref() {
        None => Verdict::Pending,
        Some(v) => parse_verdict(v)
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "BadParams", format!("unknown status {v:?}")))?,
    };
    let limit = q.limit.unwrap_or(50).min(MAX_PAGE);
    let pairs = s.store.read().unwrap().pairs_with(status, limit);
    Ok(Json(pairs).into_response())
}

#[derive(Deserialize)]
struct VerdictBody {
    verdict: String,
    #[serde(default)]
    reviewer: Option<String>,
}

async fn post_verdict(State(s): State<AppState>, Path(key): Path<String>, Json(body): Json<Value>) -> Result<Response, ApiError> {
    let body: VerdictBody = serde_json::from_value(body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidVerdict", e.to_string()))?;
    let verdict = parse_verdict(&body.verdict)
        .filter(|v| *v != Verdict::Pending)
        .ok_or_else(|| ApiError::from(StoreError::InvalidVerdict))?;
    let reviewer = body.reviewer.unwrap_or_else(|| "anonymous".into());
    let now = OffsetDateTime::now_utc().format(&Rfc3339).expect("formattable");
    let store = s.store.clone();
    let pair = tokio::task::spawn_blocking(move || store.write().unwrap().post(&key, verdict, &reviewer, now))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    Ok(Json(pair).into_response())
}

async fn leakage(State(s): State<AppState>) -> Result<Response, ApiError> {
    let report = s.store.read().unwrap().report()?;
    Ok(Json(report).into_response())
}

async fn manifest(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let unknown = || ApiError::new(StatusCode::NOT_FOUND, "UnknownDataset", format!("unknown dataset {id}"));
    if !valid_dataset_id(&id) {
        return Err(unknown());
    }
    let path = s.dir.join(DATASETS_DIR).join(format!("{id}.jsonl"));
    let file = tokio::fs::File::open(&path).await.map_err(|_| unknown())?;
    let body = Body::from_stream(tokio_util::io::ReaderStream::new(file));
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

/// Finds `images/<id>.<ext>` for a slash-separated id without `.` or `..` parts.
fn locate_image(root: &FsPath, id: &str) -> Option<PathBuf> {
    let rel = FsPath::new(id);
    if id.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(p) if !p.to_string_lossy().starts_with('.'))) {
        return None;
    }
    let dir = root.join(rel.parent().unwrap_or(FsPath::new("")));
    let stem = rel.file_name()?;
    let mut hits: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && (p.file_stem() == Some(stem) || p.file_name() == Some(stem)))
        .collect();
    hits.sort();
    hits.into_iter().next()
}

async fn image(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let unknown = |why: &str| ApiError::new(StatusCode::NOT_FOUND, "UnknownImage", format!("{id}: {why}"));
    let root = s.dir.join(IMAGES_DIR);
    let lookup_id = id.clone();
    let found = tokio::task::spawn_blocking(move || {
        let path = locate_image(&root, &lookup_id)?;
        let bytes = std::fs::read(path).ok()?;
        nnaug_fetch::validate_image(&bytes).ok()?;
        let mime = match image::guess_format(&bytes).ok()? {
            image::ImageFormat::Png => "image/png",
            image::ImageFormat::WebP => "image/webp",
            _ => "image/jpeg",
        };
        Some((mime, bytes))
    })
    .await
    .ok()
    .flatten();
    let (mime, bytes) = found.ok_or_else(|| unknown("no valid image with this id"))?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}
