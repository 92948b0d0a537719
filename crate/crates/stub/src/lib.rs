//! Local HTTP stub with scripted faults, for tests.
//!
//! Each path answers a scripted status sequence (the last status repeats),
//! optionally after a delay. The stub counts requests per path and tracks
//! peak in-flight requests both overall and per listener; every listener is
//! a separate `host:port`, so several listeners look like several hosts.
//!
//! `POST /v1/embed` answers with deterministic hash-derived vectors.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    /// Status for the n-th request; the last one repeats.
    pub statuses: Vec<u16>,
    /// Sent with 2xx statuses only.
    pub body: Vec<u8>,
    pub delay: Duration,
}

impl Route {
    pub fn ok(body: impl Into<Vec<u8>>) -> Self {
        Self { statuses: vec![200], body: body.into(), delay: Duration::ZERO }
    }

    pub fn status(code: u16) -> Self {
        Self { statuses: vec![code], body: Vec::new(), delay: Duration::ZERO }
    }

    pub fn sequence(statuses: Vec<u16>, body: impl Into<Vec<u8>>) -> Self {
        assert!(!statuses.is_empty(), "empty status sequence");
        Self { statuses, body: body.into(), delay: Duration::ZERO }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub listener: usize,
    pub method: String,
    pub path: String,
    pub status: u16,
}

/// Behaviour of the fake embedding endpoint.
#[derive(Debug, Clone)]
pub struct EmbedBehaviour {
    pub dim: usize,
    /// Statuses for successive embed calls before normal answers.
    pub failures: Vec<u16>,
    /// When set, requests without this bearer token get 401.
    pub token: Option<String>,
}

impl Default for EmbedBehaviour {
    fn default() -> Self {
        Self { dim: 16, failures: Vec::new(), token: None }
    }
}

#[derive(Default)]
struct Shared {
    routes: HashMap<String, Route>,
    hits: Mutex<HashMap<String, usize>>,
    log: Mutex<Vec<LogEntry>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    listener_in_flight: Vec<AtomicUsize>,
    listener_peak: Vec<AtomicUsize>,
    default_delay: Duration,
    embed: Option<EmbedBehaviour>,
    embed_calls: AtomicUsize,
}

struct InFlight<'a> {
    shared: &'a Shared,
    listener: usize,
}

impl<'a> InFlight<'a> {
    fn enter(shared: &'a Shared, listener: usize) -> Self {
        let now = shared.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        shared.peak.fetch_max(now, Ordering::SeqCst);
        let mine = shared.listener_in_flight[listener].fetch_add(1, Ordering::SeqCst) + 1;
        shared.listener_peak[listener].fetch_max(mine, Ordering::SeqCst);
        Self { shared, listener }
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.shared.in_flight.fetch_sub(1, Ordering::SeqCst);
        self.shared.listener_in_flight[self.listener].fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Default)]
pub struct StubBuilder {
    routes: HashMap<String, Route>,
    listeners: usize,
    default_delay: Duration,
    embed: Option<EmbedBehaviour>,
}

impl StubBuilder {
    pub fn route(mut self, path: impl Into<String>, route: Route) -> Self {
        self.routes.insert(path.into(), route);
        self
    }

    pub fn routes(mut self, routes: impl IntoIterator<Item = (String, Route)>) -> Self {
        self.routes.extend(routes);
        self
    }

    /// Number of listening ports (distinct hosts). Defaults to 1.
    pub fn listeners(mut self, n: usize) -> Self {
        self.listeners = n;
        self
    }

    /// Delay applied to routes that have none of their own.
    pub fn default_delay(mut self, d: Duration) -> Self {
        self.default_delay = d;
        self
    }

    pub fn embed(mut self, behaviour: EmbedBehaviour) -> Self {
        self.embed = Some(behaviour);
        self
    }

    pub fn start(self) -> Stub {
        let listeners = self.listeners.max(1);
        let shared = Arc::new(Shared {
            routes: self.routes,
            listener_in_flight: (0..listeners).map(|_| AtomicUsize::new(0)).collect(),
            listener_peak: (0..listeners).map(|_| AtomicUsize::new(0)).collect(),
            default_delay: self.default_delay,
            embed: self.embed,
            ..Default::default()
        });
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::watch::channel(false);
        let state = shared.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("stub runtime");
            rt.block_on(async move {
                let mut tasks = Vec::new();
                for i in 0..listeners {
                    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind stub");
                    addr_tx.send(listener.local_addr().expect("local addr")).expect("report addr");
                    let app = Router::new().route("/v1/embed", post(embed)).fallback(serve).with_state((state.clone(), i));
                    let mut stop = stop_rx.clone();
                    tasks.push(tokio::spawn(async move {
                        axum::serve(listener, app)
                            .with_graceful_shutdown(async move {
                                let _ = stop.wait_for(|s| *s).await;
                            })
                            .await
                            .ok();
                    }));
                }
                let mut stop = stop_rx.clone();
                let _ = stop.wait_for(|s| *s).await;
                for t in tasks {
                    // Lingering keep-alive connections must not hang the drop.
                    let _ = tokio::time::timeout(Duration::from_secs(2), t).await;
                }
            });
        });
        let addrs = (0..listeners).map(|_| addr_rx.recv().expect("stub started")).collect();
        Stub { addrs, shared, stop: stop_tx, thread: Some(thread) }
    }
}

type Ctx = (Arc<Shared>, usize);

async fn serve(State((shared, listener)): State<Ctx>, method: axum::http::Method, uri: Uri) -> Response {
    let path = uri.path().to_string();
    let _guard = InFlight::enter(&shared, listener);
    let Some(route) = shared.routes.get(&path) else {
        record(&shared, listener, method.as_str(), &path, 404);
        return StatusCode::NOT_FOUND.into_response();
    };
    let n = {
        let mut hits = shared.hits.lock().unwrap();
        let n = hits.entry(path.clone()).or_insert(0);
        *n += 1;
        *n - 1
    };
    let delay = if route.delay.is_zero() { shared.default_delay } else { route.delay };
    if !delay.is_zero() {
        tokio::time::sleep(delay).await;
    }
    let code = route.statuses[n.min(route.statuses.len() - 1)];
    record(&shared, listener, method.as_str(), &path, code);
    let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    if status.is_success() {
        (status, [("content-type", "application/octet-stream")], route.body.clone()).into_response()
    } else {
        status.into_response()
    }
}

fn record(shared: &Shared, listener: usize, method: &str, path: &str, status: u16) {
    shared.log.lock().unwrap().push(LogEntry { listener, method: method.to_string(), path: path.to_string(), status });
}

#[derive(Deserialize)]
struct EmbedRequest {
    model: String,
    modality: String,
    inputs: Vec<String>,
}

#[derive(Serialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

/// Deterministic vector for one input.
pub fn fake_vector(model: &str, modality: &str, input: &str, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|i| {
            let h = Sha256::new()
                .chain_update(model)
                .chain_update([0])
                .chain_update(modality)
                .chain_update([0])
                .chain_update(input)
                .chain_update((i as u32).to_le_bytes())
                .finalize();
            let x = u32::from_le_bytes([h[0], h[1], h[2], h[3]]);
            (x as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32
        })
        .collect()
}

/// Deterministic probability in [0, 1] for one input.
pub fn fake_probability(model: &str, input: &str) -> f32 {
    (fake_vector(model, "probability", input, 1)[0] + 1.0) / 2.0
}

async fn embed(State((shared, listener)): State<Ctx>, headers: HeaderMap, body: Bytes) -> Response {
    let _guard = InFlight::enter(&shared, listener);
    let behaviour = match &shared.embed {
        Some(b) => b.clone(),
        None => {
            record(&shared, listener, "POST", "/v1/embed", 404);
            return StatusCode::NOT_FOUND.into_response();
        }
    };
    let call = shared.embed_calls.fetch_add(1, Ordering::SeqCst);
    let reply = |code: StatusCode| {
        record(&shared, listener, "POST", "/v1/embed", code.as_u16());
        code
    };
    if let Some(code) = behaviour.failures.get(call) {
        return reply(StatusCode::from_u16(*code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)).into_response();
    }
    if let Some(token) = &behaviour.token {
        let expected = format!("Bearer {token}");
        if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some(expected.as_str()) {
            return reply(StatusCode::UNAUTHORIZED).into_response();
        }
    }
    let Ok(req) = serde_json::from_slice::<EmbedRequest>(&body) else {
        return reply(StatusCode::BAD_REQUEST).into_response();
    };
    let (dim, vectors) = match req.modality.as_str() {
        "probability" => (1, req.inputs.iter().map(|x| vec![fake_probability(&req.model, x)]).collect()),
        "text" | "image" => (
            behaviour.dim,
            req.inputs.iter().map(|x| fake_vector(&req.model, &req.modality, x, behaviour.dim)).collect(),
        ),
        _ => return reply(StatusCode::BAD_REQUEST).into_response(),
    };
    reply(StatusCode::OK);
    Json(EmbedResponse { dim, vectors }).into_response()
}

pub struct Stub {
    addrs: Vec<SocketAddr>,
    shared: Arc<Shared>,
    stop: tokio::sync::watch::Sender<bool>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Stub {
    pub fn builder() -> StubBuilder {
        StubBuilder::default()
    }

    /// `http://127.0.0.1:<port>` of listener `i`, no trailing slash.
    pub fn base_url(&self, i: usize) -> String {
        format!("http://{}", self.addrs[i])
    }

    pub fn url(&self, i: usize, path: &str) -> String {
        format!("{}{path}", self.base_url(i))
    }

    pub fn listeners(&self) -> usize {
        self.addrs.len()
    }

    /// Highest number of simultaneous requests seen across all listeners.
    pub fn peak_in_flight(&self) -> usize {
        self.shared.peak.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight_on(&self, listener: usize) -> usize {
        self.shared.listener_peak[listener].load(Ordering::SeqCst)
    }

    pub fn hits(&self, path: &str) -> usize {
        self.shared.hits.lock().unwrap().get(path).copied().unwrap_or(0)
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.shared.log.lock().unwrap().clone()
    }

    /// Restart every status sequence and clear the log and peaks.
    pub fn reset(&self) {
        self.shared.hits.lock().unwrap().clear();
        self.shared.log.lock().unwrap().clear();
        self.shared.peak.store(0, Ordering::SeqCst);
        for p in &self.shared.listener_peak {
            p.store(0, Ordering::SeqCst);
        }
        self.shared.embed_calls.store(0, Ordering::SeqCst);
    }

    pub fn embed_calls(&self) -> usize {
        self.shared.embed_calls.load(Ordering::SeqCst)
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        let _ = self.stop.send(true);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
