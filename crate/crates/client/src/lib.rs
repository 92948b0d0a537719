//! Blocking client for the review API.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;

use rscurate_core::review::{FieldError, RatingSubmission, ReviewStats, SampleView, ValidationErrors};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid base url: {0}")]
    BadUrl(String),
    #[error("request failed: {0}")]
    Transport(String),
    #[error("rejected: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Validation(Vec<FieldError>),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
}

impl From<reqwest::Error> for ClientError {
    fn from(e: reqwest::Error) -> Self {
        ClientError::Transport(e.without_url().to_string())
    }
}

#[derive(Deserialize)]
struct Receipt {
    seq: u64,
}

#[derive(Deserialize)]
struct Problem {
    error: String,
}

pub struct ReviewClient {
    base: reqwest::Url,
    http: Client,
    annotator: Option<String>,
}

impl ReviewClient {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        let mut base = reqwest::Url::parse(base_url).map_err(|e| ClientError::BadUrl(e.to_string()))?;
        if !base.path().ends_with('/') {
            let p = format!("{}/", base.path());
            base.set_path(&p);
        }
        let http = Client::builder().timeout(Duration::from_secs(30)).build()?;
        Ok(Self { base, http, annotator: None })
    }

    /// Sent as `X-Annotator-Id` on every request.
    pub fn with_annotator(mut self, annotator: impl Into<String>) -> Self {
        self.annotator = Some(annotator.into());
        self
    }

    fn url(&self, path: &str) -> Result<reqwest::Url, ClientError> {
        self.base.join(path).map_err(|e| ClientError::BadUrl(e.to_string()))
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<reqwest::blocking::Response, ClientError> {
        let req = match &self.annotator {
            Some(a) => req.header("x-annotator-id", a),
            None => req,
        };
        Ok(req.send()?)
    }

    fn fail(resp: reqwest::blocking::Response) -> ClientError {
        let status = resp.status();
        let body = resp.text().unwrap_or_default();
        match status {
            StatusCode::UNPROCESSABLE_ENTITY => match serde_json::from_str::<ValidationErrors>(&body) {
                Ok(v) => ClientError::Validation(v.errors),
                Err(_) => ClientError::Http { status: status.as_u16(), body },
            },
            StatusCode::NOT_FOUND => {
                let msg = serde_json::from_str::<Problem>(&body).map(|p| p.error).unwrap_or(body);
                ClientError::NotFound(msg)
            }
            _ => ClientError::Http { status: status.as_u16(), body },
        }
    }

    /// Next sample for `annotator`, or `None` once everything in scope is rated.
    pub fn next(&self, annotator: &str, subset: Option<&str>) -> Result<Option<SampleView>, ClientError> {
        let mut query = vec![("annotator", annotator)];
        if let Some(s) = subset {
            query.push(("subset", s));
        }
        let resp = self.send(self.http.get(self.url("api/v1/next")?).query(&query))?;
        match resp.status() {
            StatusCode::OK => Ok(Some(resp.json()?)),
            StatusCode::NO_CONTENT => Ok(None),
            _ => Err(Self::fail(resp)),
        }
    }

    /// Returns the log sequence number assigned to the rating.
    pub fn submit(&self, rating: &RatingSubmission) -> Result<u64, ClientError> {
        let resp = self.send(self.http.post(self.url("api/v1/ratings")?).json(rating))?;
        if resp.status() == StatusCode::CREATED {
            Ok(resp.json::<Receipt>()?.seq)
        } else {
            Err(Self::fail(resp))
        }
    }

    pub fn stats(&self) -> Result<ReviewStats, ClientError> {
        let resp = self.send(self.http.get(self.url("api/v1/stats")?))?;
        if resp.status().is_success() {
            Ok(resp.json()?)
        } else {
            Err(Self::fail(resp))
        }
    }

    pub fn image(&self, record_id: &str) -> Result<Vec<u8>, ClientError> {
        let mut url = self.url("api/v1/samples/")?;
        url.path_segments_mut().map_err(|_| ClientError::BadUrl("cannot be a base".into()))?.pop_if_empty().extend([record_id, "image"]);
        let resp = self.send(self.http.get(url))?;
        if resp.status().is_success() {
            Ok(resp.bytes()?.to_vec())
        } else {
            Err(Self::fail(resp))
        }
    }
}
