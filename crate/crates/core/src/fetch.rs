//! Bulk image download with per-host admission limits, retry with doubling
//! backoff, image validation, and content-addressed storage.

use std::collections::HashMap;
use std::io::Cursor;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::model::{Disposition, ManifestLine, SourceRecord, Stage, StageOutput};
use crate::store::BlobStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FetchPolicy {
    pub global_concurrency: usize,
    pub per_host_concurrency: usize,
    pub retries: u32,
    #[serde(with = "millis")]
    pub backoff_base: Duration,
    #[serde(with = "millis")]
    pub timeout: Duration,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl Default for FetchPolicy {
    fn default() -> Self {
        Self {
            global_concurrency: 128,
            per_host_concurrency: 4,
            retries: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(30),
        }
    }
}

impl FetchPolicy {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.global_concurrency == 0 {
            problems.push("global_concurrency must be positive".to_string());
        }
        if self.per_host_concurrency == 0 {
            problems.push("per_host_concurrency must be positive".to_string());
        }
        if self.per_host_concurrency > self.global_concurrency {
            problems.push(format!(
                "per_host_concurrency ({}) exceeds global_concurrency ({})",
                self.per_host_concurrency, self.global_concurrency
            ));
        }
        if self.timeout.is_zero() {
            problems.push("timeout must be positive".to_string());
        }
        problems
    }

    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        self.backoff_base.saturating_mul(1u32 << retry.min(20))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum InvalidImage {
    #[error("zero-size payload")]
    ZeroSize,
    #[error("undecodable payload")]
    Undecodable,
}

/// Accepts JPEG, PNG, GIF, WebP and TIFF payloads that fully decode.
pub fn validate_image(bytes: &[u8]) -> Result<ImageDims, InvalidImage> {
    use image::ImageFormat;
    if bytes.is_empty() {
        return Err(InvalidImage::ZeroSize);
    }
    let format = image::guess_format(bytes).map_err(|_| InvalidImage::Undecodable)?;
    if !matches!(
        format,
        ImageFormat::Jpeg | ImageFormat::Png | ImageFormat::Gif | ImageFormat::WebP | ImageFormat::Tiff
    ) {
        return Err(InvalidImage::Undecodable);
    }
    let decoded = image::ImageReader::with_format(Cursor::new(bytes), format)
        .decode()
        .map_err(|_| InvalidImage::Undecodable)?;
    Ok(ImageDims { width: decoded.width(), height: decoded.height() })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FetchError {
    #[error("not found (http {0})")]
    NotFound(u16),
    #[error("timeout")]
    Timeout,
    #[error("too many retries (last http {0})")]
    TooManyRetries(u16),
    #[error("invalid image: {0}")]
    Invalid(InvalidImage),
    #[error("unsupported url: {0}")]
    BadUrl(String),
    #[error("no url and no stored image")]
    NoSource,
    #[error("transport: {0}")]
    Transport(String),
    #[error("store: {0}")]
    Store(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FetchStatus {
    Fetched,
    FetchFailed,
    InvalidImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchOutcome {
    pub record_id: String,
    pub status: FetchStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_code: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub retries: u32,
    #[serde(skip)]
    pub failure: Option<FetchError>,
}

impl FetchOutcome {
    fn fetched(record_id: &str, http_code: Option<u16>, digest: String, dims: ImageDims, retries: u32) -> Self {
        Self {
            record_id: record_id.to_string(),
            status: FetchStatus::Fetched,
            http_code,
            content_hash: Some(digest),
            width: Some(dims.width),
            height: Some(dims.height),
            error: None,
            retries,
            failure: None,
        }
    }

    fn failed(record_id: &str, http_code: Option<u16>, err: FetchError, retries: u32) -> Self {
        let status = match err {
            FetchError::Invalid(_) => FetchStatus::InvalidImage,
            _ => FetchStatus::FetchFailed,
        };
        Self {
            record_id: record_id.to_string(),
            status,
            http_code,
            content_hash: None,
            width: None,
            height: None,
            error: Some(err.to_string()),
            retries,
            failure: Some(err),
        }
    }

    pub fn disposition(&self) -> Disposition {
        match self.status {
            FetchStatus::Fetched => Disposition::Kept,
            FetchStatus::FetchFailed => Disposition::FetchFailed,
            FetchStatus::InvalidImage => Disposition::RemovedInvalidImage,
        }
    }
}

/// One line of the fetch manifest: the record (with `image_ref` set when
/// fetched), its disposition, and the fetch outcome fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchManifestLine {
    #[serde(flatten)]
    pub line: ManifestLine,
    pub status: FetchStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_code: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub retries: u32,
}

pub struct Fetcher {
    client: reqwest::Client,
    policy: FetchPolicy,
    store: BlobStore,
    global: Arc<Semaphore>,
    hosts: Mutex<HashMap<String, Arc<Semaphore>>>,
}

enum Attempt {
    Done(Result<(Option<u16>, Vec<u8>), (Option<u16>, FetchError)>),
    Retry(Option<u16>, FetchError),
}

impl Fetcher {
    pub fn new(policy: FetchPolicy, store: BlobStore) -> Result<Self, FetchError> {
        let problems = policy.validate();
        if !problems.is_empty() {
            return Err(FetchError::Transport(problems.join("; ")));
        }
        let client = reqwest::Client::builder()
            .timeout(policy.timeout)
            .user_agent(concat!("rscurate/", env!("CARGO_PKG_VERSION")))
            .pool_max_idle_per_host(policy.per_host_concurrency)
            .build()
            .map_err(|e| FetchError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            global: Arc::new(Semaphore::new(policy.global_concurrency)),
            hosts: Mutex::new(HashMap::new()),
            policy,
            store,
        })
    }

    pub fn policy(&self) -> &FetchPolicy {
        &self.policy
    }

    fn host_gate(&self, host: &str) -> Arc<Semaphore> {
        let mut hosts = self.hosts.lock().expect("host table lock");
        hosts
            .entry(host.to_string())
            .or_insert_with(|| Arc::new(Semaphore::new(self.policy.per_host_concurrency)))
            .clone()
    }

    async fn attempt(&self, url: &reqwest::Url, host: &str) -> Attempt {
        let gate = self.host_gate(host);
        let _host = gate.acquire_owned().await.expect("host semaphore open");
        let _global = self.global.clone().acquire_owned().await.expect("global semaphore open");
        let resp = match self.client.get(url.clone()).send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(None, FetchError::Timeout),
            Err(e) => return Attempt::Done(Err((None, FetchError::Transport(without_url(e))))),
        };
        let code = resp.status().as_u16();
        if resp.status().is_server_error() {
            return Attempt::Retry(Some(code), FetchError::TooManyRetries(code));
        }
        if resp.status().is_client_error() {
            return Attempt::Done(Err((Some(code), FetchError::NotFound(code))));
        }
        if !resp.status().is_success() {
            return Attempt::Done(Err((Some(code), FetchError::Transport(format!("http {code}")))));
        }
        match resp.bytes().await {
            Ok(bytes) => Attempt::Done(Ok((Some(code), bytes.to_vec()))),
            Err(e) if e.is_timeout() => Attempt::Retry(Some(code), FetchError::Timeout),
            Err(e) => Attempt::Done(Err((Some(code), FetchError::Transport(without_url(e))))),
        }
    }

    pub async fn fetch_one(&self, record_id: &str, url: &str) -> FetchOutcome {
        let parsed = match reqwest::Url::parse(url.trim()) {
            Ok(u) if matches!(u.scheme(), "http" | "https") && u.host_str().is_some() => u,
            _ => return FetchOutcome::failed(record_id, None, FetchError::BadUrl(url.to_string()), 0),
        };
        let host = format!(
            "{}:{}",
            parsed.host_str().unwrap_or_default(),
            parsed.port_or_known_default().unwrap_or(0)
        );
        let mut retries = 0;
        loop {
            match self.attempt(&parsed, &host).await {
                Attempt::Done(Ok((code, bytes))) => return self.accept(record_id, code, &bytes, retries),
                Attempt::Done(Err((code, err))) => return FetchOutcome::failed(record_id, code, err, retries),
                Attempt::Retry(code, err) => {
                    if retries >= self.policy.retries {
                        return FetchOutcome::failed(record_id, code, err, retries);
                    }
                    tokio::time::sleep(self.policy.backoff(retries)).await;
                    retries += 1;
                }
            }
        }
    }

    fn accept(&self, record_id: &str, code: Option<u16>, bytes: &[u8], retries: u32) -> FetchOutcome {
        match validate_image(bytes) {
            Err(invalid) => FetchOutcome::failed(record_id, code, FetchError::Invalid(invalid), retries),
            Ok(dims) => match self.store.put(bytes) {
                Ok(digest) => FetchOutcome::fetched(record_id, code, digest, dims, retries),
                Err(e) => FetchOutcome::failed(record_id, code, FetchError::Store(e.to_string()), retries),
            },
        }
    }

    /// Records without a URL pass if their `image_ref` already resolves in the store.
    fn adopt_stored(&self, record: &SourceRecord) -> FetchOutcome {
        let id = record.record_id.as_str();
        match record.image_ref.as_deref() {
            Some(digest) if self.store.contains(digest) => match self.store.get(digest) {
                Ok(bytes) => match validate_image(&bytes) {
                    Ok(dims) => FetchOutcome::fetched(id, None, digest.to_string(), dims, 0),
                    Err(invalid) => FetchOutcome::failed(id, None, FetchError::Invalid(invalid), 0),
                },
                Err(e) => FetchOutcome::failed(id, None, FetchError::Store(e.to_string()), 0),
            },
            _ => FetchOutcome::failed(id, None, FetchError::NoSource, 0),
        }
    }

    async fn fetch_record(&self, record: &SourceRecord) -> FetchOutcome {
        match record.url.as_deref() {
            Some(url) => self.fetch_one(&record.record_id, url).await,
            None => self.adopt_stored(record),
        }
    }
}

fn without_url(e: reqwest::Error) -> String {
    e.without_url().to_string()
}

#[derive(Debug, Default)]
pub struct FetchRun {
    pub manifest: Vec<FetchManifestLine>,
    pub output: StageOutput,
}

/// Fetch every kept record; lines removed upstream pass through untouched.
/// Output order follows input order.
pub async fn run_fetch(fetcher: Arc<Fetcher>, lines: Vec<ManifestLine>) -> FetchRun {
    let mut tasks = JoinSet::new();
    let mut slots: Vec<Option<FetchOutcome>> = vec![None; lines.len()];
    for (idx, line) in lines.iter().enumerate() {
        if line.disposition != Disposition::Kept {
            continue;
        }
        let fetcher = fetcher.clone();
        let record = line.record.clone();
        tasks.spawn(async move { (idx, fetcher.fetch_record(&record).await) });
    }
    while let Some(joined) = tasks.join_next().await {
        let (idx, outcome) = joined.expect("fetch task panicked");
        slots[idx] = Some(outcome);
    }

    let mut run = FetchRun::default();
    for (line, outcome) in lines.into_iter().zip(slots) {
        let Some(outcome) = outcome else {
            run.output.lines.push(line);
            continue;
        };
        let mut record = line.record;
        if let Some(digest) = &outcome.content_hash {
            record.image_ref = Some(digest.clone());
        }
        let disposition = outcome.disposition();
        run.output.push(Stage::Fetch, record.clone(), disposition);
        run.manifest.push(FetchManifestLine {
            line: ManifestLine { record, disposition },
            status: outcome.status,
            http_code: outcome.http_code,
            content_hash: outcome.content_hash,
            width: outcome.width,
            height: outcome.height,
            error: outcome.error,
            retries: outcome.retries,
        });
    }
    run
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn png_1x1() -> Vec<u8> {
        let img = image::RgbImage::from_pixel(1, 1, image::Rgb([10, 20, 30]));
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
        out
    }

    #[test]
    fn validate_examples() {
        assert_eq!(validate_image(&[]), Err(InvalidImage::ZeroSize));
        assert_eq!(validate_image(&png_1x1()), Ok(ImageDims { width: 1, height: 1 }));
        let garbage: Vec<u8> = (0..100u32).map(|i| (i * 37 % 251) as u8).collect();
        assert_eq!(validate_image(&garbage), Err(InvalidImage::Undecodable));
        // Valid magic, truncated body.
        let png = png_1x1();
        assert_eq!(validate_image(&png[..20]), Err(InvalidImage::Undecodable));
    }

    #[test]
    fn policy_rules() {
        let p = FetchPolicy::default();
        assert!(p.validate().is_empty());
        assert_eq!(p.backoff(0), Duration::from_millis(500));
        assert_eq!(p.backoff(2), Duration::from_millis(2000));
        let bad = FetchPolicy { per_host_concurrency: 200, ..FetchPolicy::default() };
        assert_eq!(bad.validate().len(), 1);
    }
}
