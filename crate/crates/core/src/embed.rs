//! Embedding acquisition.
//!
//! All model inference sits behind [`EmbeddingProvider`]. Three backends:
//! a deterministic hash-seeded [`TestEmbedder`], an [`ArchiveProvider`] over
//! precomputed [`EmbeddingArchive`] files, and a [`RemoteEmbedder`] speaking
//! `POST /v1/embed` to an inference service.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! magic   "RSEMBED\0"            8 bytes
//! version u32 = 1
//! flags   u32                    bit 0: probability column present
//! model   u32 length + UTF-8 bytes
//! dim     u32
//! count   u64
//! keys    count × (u32 length + UTF-8 bytes), strictly ascending
//! vectors count × dim × f32
//! probs   count × f32            only when flag bit 0 is set
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};
use std::path::Path;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::store::BlobStore;

pub const DEFAULT_DIM: usize = 512;
pub const ROTATION_TAG: &str = "#rot";

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("missing keys: {0:?}")]
    MissingKey(Vec<String>),
    #[error("mixed model ids: {0} vs {1}")]
    MixedModels(String, String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in embedding")]
    NonFinite,
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("archive: {0}")]
    Corrupt(String),
    #[error("duplicate archive key '{0}'")]
    DuplicateKey(String),
    #[error("no archive for model '{0}'")]
    UnknownModel(String),
    #[error("remote embedding failed after {attempts} attempts: {detail}")]
    Remote { attempts: u32, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A model-tagged feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub model_id: String,
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(model_id: impl Into<String>, values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self { model_id: model_id.into(), values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn normalized(mut self) -> Result<Self, EmbedError> {
        let n = self.norm();
        if n < 1e-12 {
            return Err(EmbedError::ZeroNorm);
        }
        for v in &mut self.values {
            *v = (*v as f64 / n) as f32;
        }
        Ok(self)
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(&a, &b)| a as f64 * b as f64).sum()
    }
}

/// Cosine similarity; errors on dimension mismatch or a zero-norm input.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-12 || nb < 1e-12 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Checks that all vectors share model id and dimension; returns them.
pub fn check_uniform<'a>(
    vectors: impl IntoIterator<Item = &'a EmbeddingVector>,
) -> Result<Option<(&'a str, usize)>, EmbedError> {
    let mut first: Option<(&str, usize)> = None;
    for v in vectors {
        match first {
            None => first = Some((&v.model_id, v.dim())),
            Some((model, dim)) => {
                if v.model_id != model {
                    return Err(EmbedError::MixedModels(model.to_string(), v.model_id.clone()));
                }
                if v.dim() != dim {
                    return Err(EmbedError::DimensionMismatch { expected: dim, found: v.dim() });
                }
            }
        }
    }
    Ok(first)
}

pub fn rotation_key(key: &str, degrees: u32) -> String {
    format!("{key}{ROTATION_TAG}{degrees:03}")
}

fn base_key(key: &str) -> &str {
    match key.rfind(ROTATION_TAG) {
        Some(pos) if key[pos + ROTATION_TAG.len()..].bytes().all(|b| b.is_ascii_digit()) => &key[..pos],
        _ => key,
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed_text(&self, texts: &[String], model_id: &str) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed_image(&self, keys: &[String], model_id: &str) -> Result<Vec<EmbeddingVector>, EmbedError>;

    /// Remote-sensing detector probability per image key, in [0, 1].
    fn detector_probability(&self, keys: &[String], model_id: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Deterministic embedder: SHA-256 of (model, modality, input) seeds a
/// ChaCha stream of standard normals, normalized to unit length. Distinct
/// inputs are effectively orthogonal in high dimension; identical inputs
/// are bitwise identical.
#[derive(Debug, Clone)]
pub struct TestEmbedder {
    dim: usize,
    store: Option<BlobStore>,
}

impl TestEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim, store: None }
    }

    /// Image keys must resolve in `store` (rotation tags are stripped first).
    pub fn with_store(dim: usize, store: BlobStore) -> Self {
        Self { dim, store: Some(store) }
    }

    fn seed(model_id: &str, modality: &str, input: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for part in [model_id, modality, input] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.finalize().into()
    }

    fn vector(&self, model_id: &str, modality: &str, input: &str) -> EmbeddingVector {
        let mut rng = ChaCha8Rng::from_seed(Self::seed(model_id, modality, input));
        let values: Vec<f32> = (0..self.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect();
        EmbeddingVector { model_id: model_id.to_string(), values }
            .normalized()
            .expect("gaussian draw is nonzero")
    }

    fn check_keys(&self, keys: &[String]) -> Result<(), EmbedError> {
        let Some(store) = &self.store else { return Ok(()) };
        let missing: Vec<String> =
            keys.iter().filter(|k| !store.contains(base_key(k))).cloned().collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(EmbedError::MissingKey(missing))
        }
    }
}

impl EmbeddingProvider for TestEmbedder {
    fn embed_text(&self, texts: &[String], model_id: &str) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        Ok(texts.iter().map(|t| self.vector(model_id, "text", t)).collect())
    }

    fn embed_image(&self, keys: &[String], model_id: &str) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if keys.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        self.check_keys(keys)?;
        Ok(keys.iter().map(|k| self.vector(model_id, "image", k)).collect())
    }

    fn detector_probability(&self, keys: &[String], model_id: &str) -> Result<Vec<f32>, EmbedError> {
        if keys.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        self.check_keys(keys)?;
        Ok(keys
            .iter()
            .map(|k| {
                let s = Self::seed(model_id, "probability", k);
                let n = u64::from_le_bytes(s[..8].try_into().expect("8 bytes"));
                // 24 bits keep the value exactly representable as f32.
                ((n >> 40) as f64 / (1u64 << 24) as f64) as f32
            })
            .collect())
    }
}

const MAGIC: &[u8; 8] = b"RSEMBED\0";
const VERSION: u32 = 1;

/// Key-indexed dense vectors for one model, with an optional probability column.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    model_id: String,
    dim: usize,
    keys: Vec<String>,
    values: Vec<f32>,
    probabilities: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct ArchiveBuilder {
    model_id: String,
    dim: usize,
    entries: BTreeMap<String, (Vec<f32>, Option<f32>)>,
}

impl ArchiveBuilder {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Self {
        Self { model_id: model_id.into(), dim, entries: BTreeMap::new() }
    }

    pub fn insert(
        &mut self,
        key: impl Into<String>,
        vector: &EmbeddingVector,
        probability: Option<f32>,
    ) -> Result<(), EmbedError> {
        let key = key.into();
        if vector.model_id != self.model_id {
            return Err(EmbedError::MixedModels(self.model_id.clone(), vector.model_id.clone()));
        }
        if vector.dim() != self.dim {
            return Err(EmbedError::DimensionMismatch { expected: self.dim, found: vector.dim() });
        }
        if self.entries.contains_key(&key) {
            return Err(EmbedError::DuplicateKey(key));
        }
        self.entries.insert(key, (vector.values.clone(), probability));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn finish(self) -> Result<EmbeddingArchive, EmbedError> {
        let has_prob = self.entries.values().any(|(_, p)| p.is_some());
        if has_prob && self.entries.values().any(|(_, p)| p.is_none()) {
            return Err(EmbedError::Corrupt("probability column must cover every key".into()));
        }
        let mut keys = Vec::with_capacity(self.entries.len());
        let mut values = Vec::with_capacity(self.entries.len() * self.dim);
        let mut probs = Vec::new();
        for (k, (v, p)) in self.entries {
            keys.push(k);
            values.extend_from_slice(&v);
            if let Some(p) = p {
                probs.push(p);
            }
        }
        Ok(EmbeddingArchive {
            model_id: self.model_id,
            dim: self.dim,
            keys,
            values,
            probabilities: has_prob.then_some(probs),
        })
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read, limit: usize) -> Result<String, EmbedError> {
    let len = read_u32(r)? as usize;
    if len > limit {
        return Err(EmbedError::Corrupt(format!("string length {len} exceeds remaining bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| EmbedError::Corrupt("non-UTF-8 string".into()))
}

impl EmbeddingArchive {
    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn has_probabilities(&self) -> bool {
        self.probabilities.is_some()
    }

    fn index(&self, key: &str) -> Option<usize> {
        self.keys.binary_search_by(|k| k.as_str().cmp(key)).ok()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index(key).is_some()
    }

    pub fn lookup(&self, key: &str) -> Result<(EmbeddingVector, Option<f32>), EmbedError> {
        let i = self.index(key).ok_or_else(|| EmbedError::MissingKey(vec![key.to_string()]))?;
        let values = self.values[i * self.dim..(i + 1) * self.dim].to_vec();
        let prob = self.probabilities.as_ref().map(|p| p[i]);
        Ok((EmbeddingVector { model_id: self.model_id.clone(), values }, prob))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, EmbeddingVector, Option<f32>)> + '_ {
        self.keys.iter().enumerate().map(move |(i, k)| {
            let values = self.values[i * self.dim..(i + 1) * self.dim].to_vec();
            let prob = self.probabilities.as_ref().map(|p| p[i]);
            (k.as_str(), EmbeddingVector { model_id: self.model_id.clone(), values }, prob)
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let flags: u32 = if self.probabilities.is_some() { 1 } else { 0 };
        w.write_all(&flags.to_le_bytes())?;
        w.write_all(&(self.model_id.len() as u32).to_le_bytes())?;
        w.write_all(self.model_id.as_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.keys.len() as u64).to_le_bytes())?;
        for k in &self.keys {
            w.write_all(&(k.len() as u32).to_le_bytes())?;
            w.write_all(k.as_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(p) = &self.probabilities {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("write to Vec");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        let total = bytes.len();
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| EmbedError::Corrupt("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(EmbedError::Corrupt("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(EmbedError::Corrupt(format!("unsupported version {version}")));
        }
        let flags = read_u32(&mut r)?;
        let model_id = read_str(&mut r, total)?;
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        if dim == 0 {
            return Err(EmbedError::Corrupt("zero dimension".into()));
        }
        let mut keys = Vec::with_capacity(count.min(total));
        for _ in 0..count {
            let remaining = r.len();
            let key = read_str(&mut r, remaining)
                .map_err(|e| match e {
                    EmbedError::Io(_) => EmbedError::Corrupt("truncated key table".into()),
                    other => other,
                })?;
            if let Some(prev) = keys.last() {
                if *prev >= key {
                    return Err(EmbedError::Corrupt(format!("key table not strictly sorted at '{key}'")));
                }
            }
            keys.push(key);
        }
        let has_prob = flags & 1 == 1;
        let expected = count * dim * 4 + if has_prob { count * 4 } else { 0 };
        if r.len() != expected {
            // Vector payload size is the only place a wrong dim shows up.
            let found = if count == 0 { 0 } else { r.len() / 4 / count };
            return Err(EmbedError::DimensionMismatch { expected: dim, found });
        }
        let floats: Vec<f32> = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let (values, probs) = floats.split_at(count * dim);
        Ok(Self {
            model_id,
            dim,
            keys,
            values: values.to_vec(),
            probabilities: has_prob.then(|| probs.to_vec()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let file = std::fs::File::create(path)?;
        self.write_to(io::BufWriter::new(file))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Serves lookups from one archive per model id. Text archives are keyed by
/// the text itself; image archives by image key.
#[derive(Debug, Default)]
pub struct ArchiveProvider {
    text: HashMap<String, EmbeddingArchive>,
    image: HashMap<String, EmbeddingArchive>,
}

impl ArchiveProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_text(mut self, archive: EmbeddingArchive) -> Self {
        self.text.insert(archive.model_id.clone(), archive);
        self
    }

    pub fn with_image(mut self, archive: EmbeddingArchive) -> Self {
        self.image.insert(archive.model_id.clone(), archive);
        self
    }

    fn lookup_all(
        map: &HashMap<String, EmbeddingArchive>,
        keys: &[String],
        model_id: &str,
    ) -> Result<Vec<(EmbeddingVector, Option<f32>)>, EmbedError> {
        if keys.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        let archive = map.get(model_id).ok_or_else(|| EmbedError::UnknownModel(model_id.to_string()))?;
        let missing: Vec<String> = keys.iter().filter(|k| !archive.contains(k)).cloned().collect();
        if !missing.is_empty() {
            return Err(EmbedError::MissingKey(missing));
        }
        keys.iter().map(|k| archive.lookup(k)).collect()
    }
}

impl EmbeddingProvider for ArchiveProvider {
    fn embed_text(&self, texts: &[String], model_id: &str) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Self::lookup_all(&self.text, texts, model_id)?
            .into_iter()
            .map(|(v, _)| v.normalized())
            .collect()
    }

    fn embed_image(&self, keys: &[String], model_id: &str) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Self::lookup_all(&self.image, keys, model_id)?
            .into_iter()
            .map(|(v, _)| v.normalized())
            .collect()
    }

    fn detector_probability(&self, keys: &[String], model_id: &str) -> Result<Vec<f32>, EmbedError> {
        Self::lookup_all(&self.image, keys, model_id)?
            .into_iter()
            .zip(keys)
            .map(|((_, p), k)| p.ok_or_else(|| EmbedError::MissingKey(vec![format!("{k} (probability)")])))
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    modality: &'a str,
    inputs: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

/// Client for an inference service exposing `POST /v1/embed`.
///
/// Request `{model, modality, inputs[]}` with modality `text`, `image`
/// (inputs are image keys) or `probability`; response `{dim, vectors[][]}`.
/// Probabilities come back as dim-1 vectors.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: reqwest::Url,
    token: Option<String>,
    client: reqwest::blocking::Client,
    retries: u32,
    backoff: Duration,
}

pub const TOKEN_ENV: &str = "RSCURATE_EMBED_TOKEN";

impl RemoteEmbedder {
    pub fn new(base_url: &str, timeout: Duration, retries: u32) -> Result<Self, EmbedError> {
        let base = reqwest::Url::parse(base_url)
            .map_err(|e| EmbedError::Remote { attempts: 0, detail: format!("bad url: {e}") })?;
        let endpoint = base
            .join("v1/embed")
            .map_err(|e| EmbedError::Remote { attempts: 0, detail: e.to_string() })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedError::Remote { attempts: 0, detail: e.to_string() })?;
        Ok(Self {
            endpoint,
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            client,
            retries,
            backoff: Duration::from_millis(200),
        })
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn call(&self, model: &str, modality: &str, inputs: &[String]) -> Result<EmbedResponse, EmbedError> {
        if inputs.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        let body = EmbedRequest { model, modality, inputs };
        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut req = self.client.post(self.endpoint.clone()).json(&body);
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            let detail = match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: EmbedResponse = resp
                        .json()
                        .map_err(|e| EmbedError::Remote { attempts, detail: format!("bad response: {e}") })?;
                    if parsed.vectors.len() != inputs.len() {
                        return Err(EmbedError::Remote {
                            attempts,
                            detail: format!("expected {} vectors, got {}", inputs.len(), parsed.vectors.len()),
                        });
                    }
                    if let Some(bad) = parsed.vectors.iter().find(|v| v.len() != parsed.dim) {
                        return Err(EmbedError::DimensionMismatch { expected: parsed.dim, found: bad.len() });
                    }
                    return Ok(parsed);
                }
                Ok(resp) if resp.status().is_server_error() => format!("http {}", resp.status().as_u16()),
                Ok(resp) => {
                    return Err(EmbedError::Remote {
                        attempts,
                        detail: format!("http {}", resp.status().as_u16()),
                    })
                }
                Err(e) if e.is_timeout() || e.is_connect() => e.without_url().to_string(),
                Err(e) => return Err(EmbedError::Remote { attempts, detail: e.without_url().to_string() }),
            };
            if attempts > self.retries {
                return Err(EmbedError::Remote { attempts, detail });
            }
            std::thread::sleep(self.backoff * attempts);
        }
    }

    fn vectors(&self, model: &str, modality: &str, inputs: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        self.call(model, modality, inputs)?
            .vectors
            .into_iter()
            .map(|v| EmbeddingVector::new(model, v)?.normalized())
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn embed_text(&self, texts: &[String], model_id: &str) -> Result<Vec<EmbeddingVector>, EmbedError> {
        self.vectors(model_id, "text", texts)
    }

    fn embed_image(&self, keys: &[String], model_id: &str) -> Result<Vec<EmbeddingVector>, EmbedError> {
        self.vectors(model_id, "image", keys)
    }

    fn detector_probability(&self, keys: &[String], model_id: &str) -> Result<Vec<f32>, EmbedError> {
        let resp = self.call(model_id, "probability", keys)?;
        resp.vectors
            .into_iter()
            .map(|v| match v.as_slice() {
                [p] if p.is_finite() => Ok(p.clamp(0.0, 1.0)),
                _ => Err(EmbedError::DimensionMismatch { expected: 1, found: v.len() }),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn test_embedder_is_deterministic_and_unit() {
        let e = TestEmbedder::new(DEFAULT_DIM);
        let a = e.embed_text(&s(&["a satellite image.", "a satellite image."]), "m").unwrap();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[0].dim(), 512);
        assert!((a[0].norm() - 1.0).abs() < 1e-6);
        assert!((cosine(&a[0], &a[0]).unwrap() - 1.0).abs() < 1e-6);
        let b = e.embed_text(&s(&["a satellite image."]), "other").unwrap();
        assert_ne!(a[0].values, b[0].values);
        assert!(matches!(e.embed_text(&[], "m"), Err(EmbedError::EmptyBatch)));
    }

    #[test]
    fn rotation_tag_changes_image_vector() {
        let e = TestEmbedder::new(64);
        let keys = vec!["k".to_string(), rotation_key("k", 30)];
        assert_eq!(keys[1], "k#rot030");
        let v = e.embed_image(&keys, "m").unwrap();
        assert_ne!(v[0], v[1]);
        assert_eq!(e.embed_image(&keys[..1], "m").unwrap()[0], v[0]);
    }

    #[test]
    fn store_backed_embedder_reports_missing_keys() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::new(dir.path());
        let d = store.put(b"img").unwrap();
        let e = TestEmbedder::with_store(16, store);
        assert!(e.embed_image(&[d.clone(), rotation_key(&d, 90)], "m").is_ok());
        match e.embed_image(&[d, "nope".into()], "m") {
            Err(EmbedError::MissingKey(k)) => assert_eq!(k, vec!["nope".to_string()]),
            other => panic!("expected MissingKey, got {other:?}"),
        }
    }

    #[test]
    fn probabilities_in_unit_interval() {
        let e = TestEmbedder::new(8);
        let keys: Vec<String> = (0..200).map(|i| format!("k{i}")).collect();
        let p = e.detector_probability(&keys, "det").unwrap();
        assert!(p.iter().all(|x| (0.0..1.0).contains(x)));
        assert_eq!(p, e.detector_probability(&keys, "det").unwrap());
    }

    #[test]
    fn archive_lookup_and_missing() {
        let e = TestEmbedder::new(8);
        let mut b = ArchiveBuilder::new("m", 8);
        let v = e.embed_text(&s(&["x"]), "m").unwrap().remove(0);
        b.insert("x", &v, Some(0.25)).unwrap();
        assert!(matches!(b.insert("x", &v, Some(0.1)), Err(EmbedError::DuplicateKey(_))));
        let a = EmbeddingArchive::from_bytes(&b.finish().unwrap().to_bytes()).unwrap();
        assert_eq!(a.lookup("x").unwrap(), (v, Some(0.25)));
        assert!(matches!(a.lookup("y"), Err(EmbedError::MissingKey(_))));
    }

    #[test]
    fn corrupted_archive_reports_dimension_mismatch() {
        let e = TestEmbedder::new(8);
        let mut b = ArchiveBuilder::new("m", 8);
        for k in ["a", "b"] {
            b.insert(k, &e.embed_text(&s(&[k]), "m").unwrap()[0], None).unwrap();
        }
        let mut bytes = b.finish().unwrap().to_bytes();
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(
            EmbeddingArchive::from_bytes(&bytes),
            Err(EmbedError::DimensionMismatch { expected: 8, .. })
        ));
        assert!(matches!(EmbeddingArchive::from_bytes(b"nope"), Err(EmbedError::Corrupt(_))));
    }

    #[test]
    fn thousand_random_vectors_roundtrip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut b = ArchiveBuilder::new("rand", 24);
        let mut expected = BTreeMap::new();
        for i in 0..1000 {
            let values: Vec<f32> = (0..24).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            let v = EmbeddingVector::new("rand", values).unwrap();
            let p: f32 = rng.random();
            b.insert(format!("key-{i:04}"), &v, Some(p)).unwrap();
            expected.insert(format!("key-{i:04}"), (v, p));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.rsemb");
        b.finish().unwrap().save(&path).unwrap();
        let a = EmbeddingArchive::load(&path).unwrap();
        assert_eq!(a.len(), 1000);
        for (k, (v, p)) in &expected {
            let (got, gp) = a.lookup(k).unwrap();
            assert_eq!(got.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                       v.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            assert_eq!(gp.map(f32::to_bits), Some(p.to_bits()));
        }
    }

    #[test]
    fn archive_provider_serves_normalized_vectors() {
        let mut b = ArchiveBuilder::new("m", 2);
        b.insert("img", &EmbeddingVector::new("m", vec![3.0, 4.0]).unwrap(), Some(0.5)).unwrap();
        let p = ArchiveProvider::new().with_image(b.finish().unwrap());
        let v = p.embed_image(&s(&["img"]), "m").unwrap();
        assert!((v[0].values[0] - 0.6).abs() < 1e-6);
        assert_eq!(p.detector_probability(&s(&["img"]), "m").unwrap(), vec![0.5]);
        assert!(matches!(p.embed_image(&s(&["img"]), "x"), Err(EmbedError::UnknownModel(_))));
    }

    proptest! {
        #[test]
        fn batch_order_is_preserved(texts in prop::collection::vec("[a-z]{1,8}", 1..12)) {
            let e = TestEmbedder::new(16);
            let batch = e.embed_text(&texts, "m").unwrap();
            for (t, v) in texts.iter().zip(&batch) {
                let single = e.embed_text(std::slice::from_ref(t), "m").unwrap();
                prop_assert_eq!(&single[0], v);
                prop_assert!((v.norm() - 1.0).abs() < 1e-6);
            }
        }
    }
}
