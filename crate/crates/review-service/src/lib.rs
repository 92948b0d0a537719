//! HTTP service for caption review.
//!
//! Data directory layout:
//!
//! - `manifest.jsonl`: reviewed manifest; kept lines form the corpus
//! - `blobs/`: image store for `image_ref` digests
//! - `ratings.jsonl`: append-only ratings log, replayed at startup
//! - `ui/`: optional static bundle, served at `/`

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};
use tower_http::services::ServeDir;

use rscurate_core::model::read_manifest;
use rscurate_core::review::{
    aggregate_stats, next_sample, DispatchState, FieldError, LoggedRating, RatingSubmission, ReviewCorpus, SampleView,
    ValidationErrors,
};
use rscurate_core::store::BlobStore;

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const RATINGS_FILE: &str = "ratings.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |source| ServiceError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub seed: u64,
    /// Static bundle; defaults to `<data_dir>/ui` when that exists.
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self { data_dir: data_dir.into(), seed, static_dir: None }
    }
}

struct Ledger {
    log: Vec<LoggedRating>,
    dispatch: DispatchState,
}

pub struct AppState {
    corpus: ReviewCorpus,
    store: BlobStore,
    seed: u64,
    ledger: RwLock<Ledger>,
    writer: Mutex<File>,
    static_dir: Option<PathBuf>,
}

/// Replay the ratings log. A torn final line (no trailing newline) is dropped;
/// any other unreadable line is an error.
pub fn load_ratings(path: &Path) -> Result<Vec<LoggedRating>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    let mut reader = BufReader::new(file);
    let mut buf = String::new();
    let mut line = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        line += 1;
        if buf.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LoggedRating>(buf.trim_end()) {
            Ok(r) => out.push(r),
            Err(_) if !buf.ends_with('\n') => {
                tracing::warn!(line, "dropping torn final line of ratings log");
            }
            Err(e) => return Err(ServiceError::Corrupt { path: path.into(), line, message: e.to_string() }),
        }
    }
    Ok(out)
}

impl AppState {
    pub fn open(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let dir = &config.data_dir;
        let manifest = dir.join(MANIFEST_FILE);
        let f = File::open(&manifest).map_err(io_err(&manifest))?;
        let mut lines = Vec::new();
        for (i, l) in read_manifest(BufReader::new(f)).enumerate() {
            lines.push(l.map_err(|e| ServiceError::Corrupt { path: manifest.clone(), line: i + 1, message: e.to_string() })?);
        }
        let corpus = ReviewCorpus::from_manifest(lines)
            .map_err(|e| ServiceError::Corrupt { path: manifest.clone(), line: 0, message: e.to_string() })?;
        let ratings_path = dir.join(RATINGS_FILE);
        let log = load_ratings(&ratings_path)?;
        if let Ok(bytes) = std::fs::read(&ratings_path) {
            if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
                // Cut the torn line so the next append starts cleanly.
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
                let f = OpenOptions::new().write(true).open(&ratings_path).map_err(io_err(&ratings_path))?;
                f.set_len(keep as u64).map_err(io_err(&ratings_path))?;
            }
        }
        let writer = OpenOptions::new().create(true).append(true).open(&ratings_path).map_err(io_err(&ratings_path))?;
        let dispatch = DispatchState::from_log(&log);
        let static_dir = config.static_dir.clone().or_else(|| Some(dir.join("ui")).filter(|p| p.is_dir()));
        Ok(Self {
            corpus,
            store: BlobStore::new(dir.join("blobs")),
            seed: config.seed,
            ledger: RwLock::new(Ledger { log, dispatch }),
            writer: Mutex::new(writer),
            static_dir,
        })
    }

    pub fn corpus(&self) -> &ReviewCorpus {
        &self.corpus
    }

    pub async fn ratings(&self) -> Vec<LoggedRating> {
        self.ledger.read().await.log.clone()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/v1/next", get(next))
        .route("/api/v1/ratings", post(submit))
        .route("/api/v1/stats", get(stats))
        .route("/api/v1/samples/{id}/image", get(image));
    let app = match &state.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.with_state(state)
}

/// Serve on `listener` until `shutdown` resolves.
pub async fn serve(
    state: Arc<AppState>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "review service listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

#[derive(Serialize)]
struct Problem {
    error: String,
}

fn problem(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(Problem { error: msg.into() })).into_response()
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
    subset: Option<String>,
}

fn header_annotator(headers: &HeaderMap) -> Option<String> {
    headers.get(ANNOTATOR_HEADER).and_then(|v| v.to_str().ok()).map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

async fn next(State(state): State<Arc<AppState>>, headers: HeaderMap, Query(q): Query<NextQuery>) -> Response {
    let Some(annotator) = q.annotator.filter(|a| !a.trim().is_empty()).or_else(|| header_annotator(&headers)) else {
        return problem(StatusCode::BAD_REQUEST, "annotator is required");
    };
    if let Some(s) = &q.subset {
        if !state.corpus.subsets().any(|x| x == s) {
            return problem(StatusCode::NOT_FOUND, format!("unknown subset {s}"));
        }
    }
    let ledger = state.ledger.read().await;
    match next_sample(&state.corpus, &ledger.dispatch, &annotator, q.subset.as_deref(), state.seed) {
        Some(s) => Json(SampleView::of(s)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

#[derive(Serialize, Deserialize)]
pub struct Receipt {
    pub seq: u64,
}

async fn submit(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let sub: RatingSubmission = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => {
            let errors = vec![FieldError { field: "body".into(), message: e.to_string() }];
            return (StatusCode::UNPROCESSABLE_ENTITY, Json(ValidationErrors { errors })).into_response();
        }
    };
    let rating = match sub.into_rating(header_annotator(&headers).as_deref(), Utc::now()) {
        Ok(r) => r,
        Err(errors) => return (StatusCode::UNPROCESSABLE_ENTITY, Json(ValidationErrors { errors })).into_response(),
    };
    if state.corpus.get(&rating.record_id).is_none() {
        return problem(StatusCode::NOT_FOUND, format!("unknown record {}", rating.record_id));
    }
    let mut writer = state.writer.lock().await;
    let mut ledger = state.ledger.write().await;
    let seq = ledger.log.last().map_or(0, |r| r.seq + 1);
    let entry = LoggedRating { seq, rating };
    let mut line = serde_json::to_vec(&entry).expect("rating serializes");
    line.push(b'\n');
    if let Err(e) = writer.write_all(&line).and_then(|_| writer.sync_data()) {
        tracing::error!(error = %e, "ratings append failed");
        return problem(StatusCode::INTERNAL_SERVER_ERROR, "could not persist rating");
    }
    ledger.dispatch.observe(&entry.rating);
    ledger.log.push(entry);
    (StatusCode::CREATED, Json(Receipt { seq })).into_response()
}

async fn stats(State(state): State<Arc<AppState>>) -> Response {
    let ledger = state.ledger.read().await;
    Json(aggregate_stats(&ledger.log, |id| state.corpus.subset_of(id))).into_response()
}

fn content_type(bytes: &[u8]) -> &'static str {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => "image/png",
        [0xff, 0xd8, 0xff, ..] => "image/jpeg",
        [b'G', b'I', b'F', b'8', ..] => "image/gif",
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => "image/webp",
        [b'I', b'I', 42, 0, ..] | [b'M', b'M', 0, 42, ..] => "image/tiff",
        _ => "application/octet-stream",
    }
}

async fn image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(sample) = state.corpus.get(&id) else {
        return problem(StatusCode::NOT_FOUND, format!("unknown record {id}"));
    };
    let Some(digest) = &sample.image_ref else {
        return problem(StatusCode::NOT_FOUND, format!("record {id} has no image"));
    };
    let store = state.store.clone();
    let digest = digest.clone();
    match tokio::task::spawn_blocking(move || store.get(&digest)).await {
        Ok(Ok(bytes)) => ([("content-type", content_type(&bytes))], bytes).into_response(),
        Ok(Err(e)) if e.kind() == std::io::ErrorKind::NotFound => problem(StatusCode::NOT_FOUND, "image missing from store"),
        _ => problem(StatusCode::INTERNAL_SERVER_ERROR, "could not read image"),
    }
}
