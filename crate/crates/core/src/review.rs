//! Caption review: ratings, latest-wins aggregation and sample dispatch.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Disposition, ManifestLine};

pub const AXES: [&str; 3] = ["relevance_detail", "hallucination", "fluency"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub annotator_id: String,
    pub record_id: String,
    pub relevance_detail: i64,
    pub hallucination: i64,
    pub fluency: i64,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl Rating {
    pub fn axes(&self) -> [i64; 3] {
        [self.relevance_detail, self.hallucination, self.fluency]
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        if self.annotator_id.trim().is_empty() {
            errors.push(FieldError { field: "annotator_id".into(), message: "must not be empty".into() });
        }
        if self.record_id.is_empty() {
            errors.push(FieldError { field: "record_id".into(), message: "must not be empty".into() });
        }
        for (name, v) in AXES.iter().zip(self.axes()) {
            if !(1..=5).contains(&v) {
                errors.push(FieldError { field: name.to_string(), message: format!("{v} is outside 1..5") });
            }
        }
        errors
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisStats {
    pub count: u64,
    pub mean: Option<f64>,
    /// Sample standard deviation; absent below two ratings.
    pub std: Option<f64>,
}

impl AxisStats {
    pub fn from_values(values: &[i64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<i64>() as f64 / n as f64;
        let std = (n >= 2).then(|| {
            let ss: f64 = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Self { count: n as u64, mean: Some(mean), std }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AxesStats {
    pub count: u64,
    pub relevance_detail: AxisStats,
    pub hallucination: AxisStats,
    pub fluency: AxisStats,
}

impl AxesStats {
    fn from_ratings(ratings: &[&Rating]) -> Self {
        let col = |f: fn(&Rating) -> i64| ratings.iter().map(|r| f(r)).collect::<Vec<_>>();
        Self {
            count: ratings.len() as u64,
            relevance_detail: AxisStats::from_values(&col(|r| r.relevance_detail)),
            hallucination: AxisStats::from_values(&col(|r| r.hallucination)),
            fluency: AxisStats::from_values(&col(|r| r.fluency)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub overall: AxesStats,
    pub subsets: BTreeMap<String, AxesStats>,
}

/// One entry of the ratings log; `seq` is the arrival order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedRating {
    pub seq: u64,
    #[serde(flatten)]
    pub rating: Rating,
}

/// Latest rating per (annotator, record), ordered by (submitted_at, seq).
pub fn latest_ratings(log: &[LoggedRating]) -> Vec<&Rating> {
    let mut latest: BTreeMap<(&str, &str), &LoggedRating> = BTreeMap::new();
    for entry in log {
        let key = (entry.rating.annotator_id.as_str(), entry.rating.record_id.as_str());
        let newer = |old: &LoggedRating| (entry.rating.submitted_at, entry.seq) > (old.rating.submitted_at, old.seq);
        match latest.get(&key) {
            Some(old) if !newer(old) => {}
            _ => {
                latest.insert(key, entry);
            }
        }
    }
    latest.into_values().map(|e| &e.rating).collect()
}

/// Overall and per-subset statistics. `subset_of` maps record ids to subsets;
/// ratings for unknown records count only toward the overall figures.
pub fn aggregate_stats(log: &[LoggedRating], subset_of: impl Fn(&str) -> Option<String>) -> ReviewStats {
    let latest = latest_ratings(log);
    let mut groups: BTreeMap<String, Vec<&Rating>> = BTreeMap::new();
    for r in &latest {
        if let Some(s) = subset_of(&r.record_id) {
            groups.entry(s).or_default().push(r);
        }
    }
    ReviewStats {
        overall: AxesStats::from_ratings(&latest),
        subsets: groups.into_iter().map(|(k, v)| (k, AxesStats::from_ratings(&v))).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSample {
    pub record_id: String,
    pub subset: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("duplicate record id {0}")]
    Duplicate(String),
}

#[derive(Debug, Clone, Default)]
pub struct ReviewCorpus {
    samples: Vec<ReviewSample>,
    index: HashMap<String, usize>,
    subsets: BTreeMap<String, Vec<usize>>,
}

impl ReviewCorpus {
    pub fn new(samples: Vec<ReviewSample>) -> Result<Self, CorpusError> {
        let mut index = HashMap::new();
        let mut subsets: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.record_id.clone(), i).is_some() {
                return Err(CorpusError::Duplicate(s.record_id.clone()));
            }
            subsets.entry(s.subset.clone()).or_default().push(i);
        }
        Ok(Self { samples, index, subsets })
    }

    /// Kept manifest lines, grouped into subsets by source.
    pub fn from_manifest(lines: impl IntoIterator<Item = ManifestLine>) -> Result<Self, CorpusError> {
        Self::new(
            lines
                .into_iter()
                .filter(|l| l.disposition == Disposition::Kept)
                .map(|l| ReviewSample {
                    record_id: l.record.record_id,
                    subset: l.record.source.as_str().to_string(),
                    caption: l.record.caption,
                    image_ref: l.record.image_ref,
                })
                .collect(),
        )
    }

    pub fn get(&self, record_id: &str) -> Option<&ReviewSample> {
        self.index.get(record_id).map(|&i| &self.samples[i])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subsets(&self) -> impl Iterator<Item = &str> {
        self.subsets.keys().map(String::as_str)
    }

    pub fn subset_of(&self, record_id: &str) -> Option<String> {
        self.get(record_id).map(|s| s.subset.clone())
    }
}

/// Who rated what, derived from the log.
#[derive(Debug, Clone, Default)]
pub struct DispatchState {
    rated_by: HashMap<String, BTreeSet<String>>,
    raters: HashMap<String, BTreeSet<String>>,
}

impl DispatchState {
    pub fn from_log(log: &[LoggedRating]) -> Self {
        let mut s = Self::default();
        for e in log {
            s.observe(&e.rating);
        }
        s
    }

    pub fn observe(&mut self, rating: &Rating) {
        self.rated_by.entry(rating.annotator_id.clone()).or_default().insert(rating.record_id.clone());
        self.raters.entry(rating.record_id.clone()).or_default().insert(rating.annotator_id.clone());
    }

    pub fn has_rated(&self, annotator: &str, record_id: &str) -> bool {
        self.rated_by.get(annotator).is_some_and(|s| s.contains(record_id))
    }

    pub fn rating_count(&self, record_id: &str) -> usize {
        self.raters.get(record_id).map_or(0, BTreeSet::len)
    }
}

fn tie_hash(seed: u64, annotator: &str, record_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((annotator.len() as u64).to_le_bytes());
    h.update(annotator.as_bytes());
    h.update(record_id.as_bytes());
    h.finalize().into()
}

/// Next unrated sample for `annotator`.
///
/// Subsets with remaining work are visited round-robin in name order, the
/// turn being the annotator's in-scope rated count modulo the number of such
/// subsets. Within a subset the least-rated record wins; ties go to the
/// smallest seeded hash.
pub fn next_sample<'a>(
    corpus: &'a ReviewCorpus,
    state: &DispatchState,
    annotator: &str,
    subset: Option<&str>,
    seed: u64,
) -> Option<&'a ReviewSample> {
    let in_scope: Vec<(&String, &Vec<usize>)> =
        corpus.subsets.iter().filter(|(name, _)| subset.is_none_or(|s| s == name.as_str())).collect();
    let done = in_scope
        .iter()
        .flat_map(|(_, idx)| idx.iter())
        .filter(|&&i| state.has_rated(annotator, &corpus.samples[i].record_id))
        .count();
    let open: Vec<Vec<&ReviewSample>> = in_scope
        .iter()
        .map(|(_, idx)| {
            idx.iter()
                .map(|&i| &corpus.samples[i])
                .filter(|s| !state.has_rated(annotator, &s.record_id))
                .collect::<Vec<_>>()
        })
        .filter(|v| !v.is_empty())
        .collect();
    if open.is_empty() {
        return None;
    }
    let pool = &open[done % open.len()];
    pool.iter()
        .min_by_key(|s| (state.rating_count(&s.record_id), tie_hash(seed, annotator, &s.record_id)))
        .copied()
}

/// Rating as posted by a client. Everything is optional so that missing
/// fields are reported alongside range errors.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSubmission {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance_detail: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fluency: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_at: Option<DateTime<Utc>>,
}

impl RatingSubmission {
    /// `annotator` fills in a missing `annotator_id`; `now` a missing timestamp.
    pub fn into_rating(self, annotator: Option<&str>, now: DateTime<Utc>) -> Result<Rating, Vec<FieldError>> {
        let mut errors = Vec::new();
        let mut required = |field: &str, v: Option<i64>| {
            if v.is_none() {
                errors.push(FieldError { field: field.into(), message: "is required".into() });
            }
            v.unwrap_or(0)
        };
        let relevance_detail = required("relevance_detail", self.relevance_detail);
        let hallucination = required("hallucination", self.hallucination);
        let fluency = required("fluency", self.fluency);
        let rating = Rating {
            annotator_id: self.annotator_id.or_else(|| annotator.map(str::to_string)).unwrap_or_default(),
            record_id: self.record_id.unwrap_or_default(),
            relevance_detail,
            hallucination,
            fluency,
            submitted_at: self.submitted_at.unwrap_or(now),
        };
        let missing: BTreeSet<String> = errors.iter().map(|e| e.field.clone()).collect();
        errors.extend(rating.validate().into_iter().filter(|e| !missing.contains(&e.field)));
        if errors.is_empty() {
            Ok(rating)
        } else {
            Err(errors)
        }
    }
}

/// Sample as returned by the review API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleView {
    pub record_id: String,
    pub subset: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

impl SampleView {
    pub fn of(sample: &ReviewSample) -> Self {
        Self {
            record_id: sample.record_id.clone(),
            subset: sample.subset.clone(),
            caption: sample.caption.clone(),
            image_url: sample.image_ref.as_ref().map(|_| format!("/api/v1/samples/{}/image", sample.record_id)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationErrors {
    pub errors: Vec<FieldError>,
}
