//! Joint (s, c) percentile filtering.
//!
//! `s` is the cosine between an image embedding and the mean embedding of
//! the remote-sensing prompt templates; `c` is the detector probability.
//! A record survives if it is in the top `keep_fraction_s` of s-scores and
//! the top `keep_fraction_c` of c-scores, ranked over the whole stream.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{check_uniform, cosine, EmbedError, EmbeddingVector};
use crate::model::{Disposition, ManifestLine, Stage, StageOutput};

pub const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.txt");

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("template centroid has zero norm")]
    ZeroCentroid,
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error("no templates")]
    NoTemplates,
    #[error("invalid filter policy: {0}")]
    Policy(String),
    #[error("invalid score for {id}: {detail}")]
    InvalidScore { id: String, detail: String },
    #[error("missing scores for {0:?}")]
    MissingScores(Vec<String>),
    #[error("detector split: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub templates: Vec<String>,
}

impl TemplateSet {
    /// One template per non-blank line; lines starting with `#` are comments.
    pub fn parse(text: &str) -> Result<Self, ScoreError> {
        let templates: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        if templates.is_empty() {
            return Err(ScoreError::NoTemplates);
        }
        Ok(Self { templates })
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates parse")
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPolicy {
    pub keep_fraction_s: f64,
    pub keep_fraction_c: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self { keep_fraction_s: 0.9, keep_fraction_c: 0.8 }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, v) in [("keep_fraction_s", self.keep_fraction_s), ("keep_fraction_c", self.keep_fraction_c)] {
            if !(v > 0.0 && v <= 1.0) {
                problems.push(format!("{name} = {v} is outside (0, 1]"));
            }
        }
        problems
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub s: f64,
    pub c: f64,
}

impl ScorePair {
    pub fn validate(&self) -> Result<(), String> {
        if !self.s.is_finite() || !(-1.0..=1.0).contains(&self.s) {
            return Err(format!("s = {} outside [-1, 1]", self.s));
        }
        if !self.c.is_finite() || !(0.0..=1.0).contains(&self.c) {
            return Err(format!("c = {} outside [0, 1]", self.c));
        }
        Ok(())
    }
}

/// Componentwise mean of the template embeddings.
pub fn template_centroid(text_embeddings: &[EmbeddingVector]) -> Result<EmbeddingVector, ScoreError> {
    let Some((model, dim)) = check_uniform(text_embeddings)? else {
        return Err(ScoreError::NoTemplates);
    };
    let mut sum = vec![0.0f64; dim];
    for v in text_embeddings {
        for (acc, &x) in sum.iter_mut().zip(&v.values) {
            *acc += x as f64;
        }
    }
    let n = text_embeddings.len() as f64;
    let mean: Vec<f32> = sum.into_iter().map(|x| (x / n) as f32).collect();
    let centroid = EmbeddingVector::new(model, mean)?;
    if centroid.norm() < 1e-9 {
        return Err(ScoreError::ZeroCentroid);
    }
    Ok(centroid)
}

pub fn clip_score(centroid: &EmbeddingVector, image: &EmbeddingVector) -> Result<f64, ScoreError> {
    Ok(cosine(centroid, image)?)
}

/// Number of records dropped when keeping `keep_fraction` of `n`.
///
/// The epsilon absorbs binary rounding of `1 - keep` (e.g. 0.1·10 = 0.999…).
pub fn drop_count(n: usize, keep_fraction: f64) -> usize {
    (((1.0 - keep_fraction) * n as f64) + 1e-9).floor().max(0.0) as usize
}

/// Drop the `drop_count` lowest-valued ids; ties drop the lower id first.
pub fn drop_lowest(scores: &BTreeMap<String, f64>, keep_fraction: f64) -> BTreeSet<String> {
    let mut ranked: Vec<(&String, f64)> = scores.iter().map(|(k, &v)| (k, v)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    let drop = drop_count(ranked.len(), keep_fraction);
    ranked.into_iter().skip(drop).map(|(k, _)| k.clone()).collect()
}

pub fn joint_filter(
    pairs: &BTreeMap<String, ScorePair>,
    policy: &FilterPolicy,
) -> Result<BTreeSet<String>, ScoreError> {
    let problems = policy.validate();
    if !problems.is_empty() {
        return Err(ScoreError::Policy(problems.join("; ")));
    }
    for (id, p) in pairs {
        p.validate().map_err(|detail| ScoreError::InvalidScore { id: id.clone(), detail })?;
    }
    let s: BTreeMap<String, f64> = pairs.iter().map(|(k, p)| (k.clone(), p.s)).collect();
    let c: BTreeMap<String, f64> = pairs.iter().map(|(k, p)| (k.clone(), p.c)).collect();
    let keep_s = drop_lowest(&s, policy.keep_fraction_s);
    let keep_c = drop_lowest(&c, policy.keep_fraction_c);
    Ok(keep_s.intersection(&keep_c).cloned().collect())
}

/// Apply the joint filter to kept lines whose id appears in `pairs`;
/// kept lines without a score (e.g. exempt sources) pass through as kept.
/// Set `require_all` to reject unscored kept lines instead.
pub fn apply_score_filter(
    lines: Vec<ManifestLine>,
    pairs: &BTreeMap<String, ScorePair>,
    policy: &FilterPolicy,
    require_all: bool,
) -> Result<StageOutput, ScoreError> {
    if require_all {
        let missing: Vec<String> = lines
            .iter()
            .filter(|l| l.disposition == Disposition::Kept && !pairs.contains_key(&l.record.record_id))
            .map(|l| l.record.record_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(ScoreError::MissingScores(missing));
        }
    }
    let kept = joint_filter(pairs, policy)?;
    let mut out = StageOutput::default();
    for line in lines {
        if line.disposition != Disposition::Kept {
            out.lines.push(line);
            continue;
        }
        let id = &line.record.record_id;
        let d = if !pairs.contains_key(id) || kept.contains(id) {
            Disposition::Kept
        } else {
            Disposition::RemovedByScoreFilter
        };
        out.push(Stage::ScoreFilter, line.record, d);
    }
    Ok(out)
}

/// `record_id,s,c,kept` rows in id order.
pub fn write_scores_csv<W: Write>(
    writer: W,
    pairs: &BTreeMap<String, ScorePair>,
    kept: &BTreeSet<String>,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["record_id", "s", "c", "kept"])?;
    for (id, p) in pairs {
        w.write_record([id.as_str(), &p.s.to_string(), &p.c.to_string(), &kept.contains(id).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DetectorSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Class-balanced 7:1:2 split. Each class is shuffled with a seed derived
/// from (seed, class) and cut at floor(0.7n) / floor(0.1n) / remainder.
pub fn detector_split(items: &[(String, String)], seed: u64) -> Result<DetectorSplit, ScoreError> {
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, class) in items {
        by_class.entry(class.as_str()).or_default().push(id.as_str());
    }
    if by_class.len() < 2 {
        return Err(ScoreError::Split(format!("need at least 2 classes, found {}", by_class.len())));
    }
    if let Some((class, ids)) = by_class.iter().find(|(_, ids)| ids.len() < 10) {
        return Err(ScoreError::Split(format!("class '{class}' has {} items, need at least 10", ids.len())));
    }
    let mut split = DetectorSplit::default();
    for (class, mut ids) in by_class {
        ids.sort_unstable();
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(class.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        ids.shuffle(&mut rng);
        let n = ids.len();
        let (train, val) = (n * 7 / 10, n / 10);
        split.train.extend(ids[..train].iter().map(|s| s.to_string()));
        split.val.extend(ids[train..train + val].iter().map(|s| s.to_string()));
        split.test.extend(ids[train + val..].iter().map(|s| s.to_string()));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{EmbeddingProvider, TestEmbedder};
    use crate::model::{Source, SourceRecord};
    use proptest::prelude::*;

    fn v(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new("m", values.to_vec()).unwrap()
    }

    fn scores(values: &[(&str, f64)]) -> BTreeMap<String, f64> {
        values.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(template_centroid(&[v(&[0.6, 0.8])]).unwrap(), v(&[0.6, 0.8]));
        assert!(matches!(template_centroid(&[v(&[1.0, 2.0]), v(&[-1.0, -2.0])]), Err(ScoreError::ZeroCentroid)));
        let mixed = [v(&[1.0]), EmbeddingVector::new("x", vec![1.0]).unwrap()];
        assert!(matches!(template_centroid(&mixed), Err(ScoreError::Embedding(EmbedError::MixedModels(..)))));
        assert!(matches!(template_centroid(&[]), Err(ScoreError::NoTemplates)));
    }

    #[test]
    fn bundled_templates_embed_to_33_entries() {
        let t = TemplateSet::bundled();
        assert_eq!(t.templates.len(), 33);
        assert_eq!(t.templates[0], "a remote sensing image.");
        assert_eq!(t.templates[32], "a good satellite image.");
        let embs = TestEmbedder::new(32).embed_text(&t.templates, "clip").unwrap();
        assert_eq!(embs.len(), 33);
        template_centroid(&embs).unwrap();
    }

    #[test]
    fn clip_score_examples() {
        let a = v(&[0.3, 0.4]);
        assert!((clip_score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(clip_score(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let img = v(&[0.2, -0.7]);
        let scaled = v(&[3.0, 4.0]);
        assert!((clip_score(&a, &img).unwrap() - clip_score(&scaled, &img).unwrap()).abs() < 1e-6);
        assert!(clip_score(&v(&[0.0, 0.0]), &img).is_err());
    }

    #[test]
    fn drop_lowest_examples() {
        let ten = scores(&[
            ("r0", 0.5), ("r1", 0.9), ("r2", 0.1), ("r3", 0.7), ("r4", 0.3),
            ("r5", 0.8), ("r6", 0.2), ("r7", 0.6), ("r8", 0.4), ("r9", 0.95),
        ]);
        let kept = drop_lowest(&ten, 0.9);
        assert_eq!(kept.len(), 9);
        assert!(!kept.contains("r2"));
        assert_eq!(drop_lowest(&ten, 1.0).len(), 10);

        // r4 and r6 tie at the cut for keep 0.8: two drops are r2 (0.1) and the lower id of the tie.
        let mut tied = ten.clone();
        tied.insert("r4".into(), 0.2);
        let kept = drop_lowest(&tied, 0.8);
        assert_eq!(kept.len(), 8);
        assert!(!kept.contains("r2") && !kept.contains("r4") && kept.contains("r6"));
    }

    #[test]
    fn joint_filter_intersection() {
        let pairs: BTreeMap<String, ScorePair> = [
            ("r1", ScorePair { s: 0.1, c: 0.9 }),
            ("r2", ScorePair { s: 0.5, c: 0.1 }),
            ("r3", ScorePair { s: 0.6, c: 0.8 }),
            ("r4", ScorePair { s: 0.7, c: 0.7 }),
        ]
        .into_iter()
        .map(|(k, p)| (k.to_string(), p))
        .collect();
        let policy = FilterPolicy { keep_fraction_s: 0.75, keep_fraction_c: 0.75 };
        let kept = joint_filter(&pairs, &policy).unwrap();
        assert_eq!(kept.into_iter().collect::<Vec<_>>(), ["r3", "r4"]);
        let all = FilterPolicy { keep_fraction_s: 1.0, keep_fraction_c: 1.0 };
        assert_eq!(joint_filter(&pairs, &all).unwrap().len(), 4);
        let bad = FilterPolicy { keep_fraction_s: 1.5, keep_fraction_c: 0.8 };
        assert!(matches!(joint_filter(&pairs, &bad), Err(ScoreError::Policy(_))));
    }

    #[test]
    fn apply_filter_records_dispositions() {
        let lines: Vec<ManifestLine> = (0..10)
            .map(|i| ManifestLine::kept(SourceRecord::new(format!("r{i}"), Source::Laion2b, "x")))
            .collect();
        let pairs: BTreeMap<String, ScorePair> = (0..10)
            .map(|i| (format!("r{i}"), ScorePair { s: i as f64 / 10.0, c: i as f64 / 10.0 }))
            .collect();
        let out = apply_score_filter(lines, &pairs, &FilterPolicy::default(), true).unwrap();
        assert_eq!(out.count(Disposition::Kept), 8);
        assert_eq!(out.count(Disposition::RemovedByScoreFilter), 2);
        assert_eq!(out.ledger.verify_conservation(), Ok(()));
    }

    #[test]
    fn split_examples() {
        let items: Vec<(String, String)> = (0..10_000)
            .map(|i| (format!("img{i:05}"), if i % 2 == 0 { "rs" } else { "non_rs" }.to_string()))
            .collect();
        let s = detector_split(&items, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7000, 1000, 2000));
        let class_of: BTreeMap<&str, &str> = items.iter().map(|(i, c)| (i.as_str(), c.as_str())).collect();
        let count = |ids: &[String], c: &str| ids.iter().filter(|i| class_of[i.as_str()] == c).count();
        assert_eq!((count(&s.train, "rs"), count(&s.val, "rs"), count(&s.test, "rs")), (3500, 500, 1000));
        assert_eq!(s, detector_split(&items, 3).unwrap());

        let small: Vec<(String, String)> =
            (0..20).map(|i| (format!("x{i}"), if i < 10 { "a" } else { "b" }.to_string())).collect();
        let s = detector_split(&small, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 2, 4));

        let one_class: Vec<(String, String)> = (0..20).map(|i| (format!("x{i}"), "a".to_string())).collect();
        assert!(detector_split(&one_class, 0).is_err());
        let tiny: Vec<(String, String)> =
            (0..15).map(|i| (format!("x{i}"), if i < 9 { "a" } else { "b" }.to_string())).collect();
        assert!(detector_split(&tiny, 0).is_err());
    }

    proptest! {
        #[test]
        fn kept_size_formula(values in prop::collection::vec(-1.0f64..1.0, 0..300), keep in 0.01f64..=1.0) {
            let s: BTreeMap<String, f64> = values.iter().enumerate().map(|(i, v)| (format!("r{i:03}"), *v)).collect();
            let kept = drop_lowest(&s, keep);
            prop_assert_eq!(kept.len(), s.len() - drop_count(s.len(), keep));
        }

        #[test]
        fn invariant_under_increasing_transform(values in prop::collection::vec(-1.0f64..1.0, 1..200), keep in 0.05f64..=1.0) {
            let s: BTreeMap<String, f64> = values.iter().enumerate().map(|(i, v)| (format!("r{i:03}"), *v)).collect();
            let t: BTreeMap<String, f64> = s.iter().map(|(k, v)| (k.clone(), (3.0 * v).exp() + 2.0)).collect();
            prop_assert_eq!(drop_lowest(&s, keep), drop_lowest(&t, keep));
        }
    }
}
