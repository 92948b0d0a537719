//! Two-stage caption re-ranking and rotation-invariant selection.

use std::collections::HashSet;
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{cosine, rotation_key, EmbedError, EmbeddingProvider, EmbeddingVector};

pub const ROTATIONS: usize = 12;
pub const ROTATION_STEP_DEGREES: u32 = 30;

#[derive(Debug, thiserror::Error)]
pub enum CaptionError {
    #[error("candidate set {0} is empty")]
    NoCandidates(String),
    #[error("candidate set {image_id} repeats caption {caption:?}")]
    DuplicateCandidate { image_id: String, caption: String },
    #[error("rotation matrix must have {expected} columns, row {row} has {found}")]
    Columns { expected: usize, row: usize, found: usize },
    #[error("rotation matrix value {value} at ({row}, {col}) outside [-1, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("rotation matrix has no rows")]
    EmptyMatrix,
    #[error("mode {0:?} needs a rotation matrix")]
    MissingMatrix(SelectMode),
    #[error("no stage-B ranking available")]
    MissingRanking,
    #[error("index {0} out of range")]
    BadIndex(usize),
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidateSet {
    pub image_id: String,
    pub candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_a_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_b_scores: Option<Vec<f64>>,
}

impl CaptionCandidateSet {
    pub fn new(image_id: impl Into<String>, candidates: Vec<String>) -> Result<Self, CaptionError> {
        let set = Self { image_id: image_id.into(), candidates, stage_a_scores: None, stage_b_scores: None };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), CaptionError> {
        if self.candidates.is_empty() {
            return Err(CaptionError::NoCandidates(self.image_id.clone()));
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            if !seen.insert(c.as_str()) {
                return Err(CaptionError::DuplicateCandidate { image_id: self.image_id.clone(), caption: c.clone() });
            }
        }
        Ok(())
    }
}

/// Line-delimited `{image_id, candidates[]}` objects.
pub fn read_candidates<R: BufRead>(reader: R) -> Result<Vec<CaptionCandidateSet>, CaptionError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CaptionError::Parse { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let set: CaptionCandidateSet =
            serde_json::from_str(&line).map_err(|e| CaptionError::Parse { line: i + 1, message: e.to_string() })?;
        set.validate().map_err(|e| CaptionError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(set);
    }
    Ok(out)
}

fn rank(image: &EmbeddingVector, texts: &[EmbeddingVector], top: usize) -> Result<Vec<(usize, f64)>, EmbedError> {
    let mut scored = texts
        .iter()
        .enumerate()
        .map(|(i, t)| cosine(image, t).map(|s| (i, s)))
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top);
    Ok(scored)
}

/// Candidate indices by descending similarity, ties by index, truncated to `top_m`.
pub fn rank_stage_a(
    image: &EmbeddingVector,
    candidates: &[EmbeddingVector],
    top_m: usize,
) -> Result<Vec<(usize, f64)>, EmbedError> {
    rank(image, candidates, top_m)
}

/// Re-rank a stage-A subset. `subset` holds the stage-B text embeddings
/// in stage-A order; returned indices are positions within that subset.
pub fn rerank_stage_b(
    image: &EmbeddingVector,
    subset: &[EmbeddingVector],
    top_k: usize,
) -> Result<Vec<(usize, f64)>, EmbedError> {
    rank(image, subset, top_k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationSimilarityMatrix {
    values: Vec<[f64; ROTATIONS]>,
}

impl RotationSimilarityMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, CaptionError> {
        if rows.is_empty() {
            return Err(CaptionError::EmptyMatrix);
        }
        let mut values = Vec::with_capacity(rows.len());
        for (r, row) in rows.into_iter().enumerate() {
            let arr: [f64; ROTATIONS] = row
                .clone()
                .try_into()
                .map_err(|_| CaptionError::Columns { expected: ROTATIONS, row: r, found: row.len() })?;
            for (c, &v) in arr.iter().enumerate() {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(CaptionError::OutOfRange { row: r, col: c, value: v });
                }
            }
            values.push(arr);
        }
        Ok(Self { values })
    }

    /// Cosine of each caption against the 12 rotated image embeddings.
    pub fn from_embeddings(
        captions: &[EmbeddingVector],
        rotated_images: &[EmbeddingVector],
    ) -> Result<Self, CaptionError> {
        if rotated_images.len() != ROTATIONS {
            return Err(CaptionError::Columns { expected: ROTATIONS, row: 0, found: rotated_images.len() });
        }
        let rows = captions
            .iter()
            .map(|t| rotated_images.iter().map(|x| cosine(t, x).map(|c| c.clamp(-1.0, 1.0))).collect())
            .collect::<Result<Vec<Vec<f64>>, _>>()?;
        Self::new(rows)
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, j: usize) -> Option<&[f64; ROTATIONS]> {
        self.values.get(j)
    }
}

/// Population variance of row `j`.
pub fn rotation_variance(matrix: &RotationSimilarityMatrix, j: usize) -> Option<f64> {
    matrix.row(j).map(|r| population_variance(r))
}

pub fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    population_variance(xs) * xs.len() as f64 / (xs.len() as f64 - 1.0)
}

/// Row with the smallest rotation variance; lowest index on ties.
pub fn rotation_invariant_select(matrix: &RotationSimilarityMatrix) -> usize {
    let mut best = (0, f64::INFINITY);
    for j in 0..matrix.rows() {
        let v = rotation_variance(matrix, j).expect("row in range");
        if v < best.1 {
            best = (j, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Rank1,
    #[serde(alias = "rotation")]
    RotationInvariant,
    #[serde(alias = "random")]
    RandomOfBoth,
}

impl std::str::FromStr for SelectMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rank1" => Ok(Self::Rank1),
            "rotation" | "rotation_invariant" => Ok(Self::RotationInvariant),
            "random" | "random_of_both" => Ok(Self::RandomOfBoth),
            other => Err(format!("unknown mode '{other}' (expected rank1, rotation or random)")),
        }
    }
}

/// Per-image coin derived from (seed, image_id); true picks the rotation-invariant caption.
pub fn coin(seed: u64, image_id: &str) -> bool {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into()).random::<bool>()
}

/// `ranking` is the stage-B order as candidate indices into `set.candidates`.
/// `matrix` rows correspond to `matrix_rows` (candidate indices).
pub fn select_final_caption<'a>(
    set: &'a CaptionCandidateSet,
    ranking: &[usize],
    matrix: Option<(&RotationSimilarityMatrix, &[usize])>,
    mode: SelectMode,
    seed: u64,
) -> Result<&'a str, CaptionError> {
    let caption = |i: usize| set.candidates.get(i).map(String::as_str).ok_or(CaptionError::BadIndex(i));
    let rank1 = *ranking.first().ok_or(CaptionError::MissingRanking)?;
    let rotation = || -> Result<usize, CaptionError> {
        let (m, rows) = matrix.ok_or(CaptionError::MissingMatrix(mode))?;
        let j = rotation_invariant_select(m);
        rows.get(j).copied().ok_or(CaptionError::BadIndex(j))
    };
    match mode {
        SelectMode::Rank1 => caption(rank1),
        SelectMode::RotationInvariant => caption(rotation()?),
        SelectMode::RandomOfBoth => {
            let rot = rotation()?;
            caption(if coin(seed, &set.image_id) { rot } else { rank1 })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationScope {
    TopK,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionPolicy {
    pub top_m: usize,
    pub top_k: usize,
    pub mode: SelectMode,
    pub rotation_scope: RotationScope,
    pub model_a: String,
    pub model_b: String,
}

impl Default for CaptionPolicy {
    fn default() -> Self {
        Self {
            top_m: 10,
            top_k: 5,
            mode: SelectMode::RandomOfBoth,
            rotation_scope: RotationScope::TopK,
            model_a: "clip-vit-h-14".into(),
            model_b: "clip-rn50x64".into(),
        }
    }
}

impl CaptionPolicy {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.top_m == 0 {
            p.push("top_m must be at least 1".to_string());
        }
        if self.top_k == 0 {
            p.push("top_k must be at least 1".to_string());
        }
        if self.top_k > self.top_m {
            p.push(format!("top_k ({}) exceeds top_m ({})", self.top_k, self.top_m));
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionChoice {
    pub image_id: String,
    pub caption: String,
    pub rank1: String,
    pub rotation_invariant: Option<String>,
    pub stage_b_order: Vec<usize>,
}

/// Full selection for one image using `provider` for both models.
/// The image is addressed by `image_key`; rotations by `key#rotNNN`.
pub fn select_for_image(
    provider: &dyn EmbeddingProvider,
    set: &CaptionCandidateSet,
    image_key: &str,
    policy: &CaptionPolicy,
    seed: u64,
) -> Result<CaptionChoice, CaptionError> {
    set.validate()?;
    let key = [image_key.to_string()];
    let img_a = provider.embed_image(&key, &policy.model_a)?.remove(0);
    let text_a = provider.embed_text(&set.candidates, &policy.model_a)?;
    let stage_a: Vec<usize> = rank_stage_a(&img_a, &text_a, policy.top_m)?.into_iter().map(|(i, _)| i).collect();

    let img_b = provider.embed_image(&key, &policy.model_b)?.remove(0);
    let subset_texts: Vec<String> = stage_a.iter().map(|&i| set.candidates[i].clone()).collect();
    let text_b = provider.embed_text(&subset_texts, &policy.model_b)?;
    let stage_b: Vec<usize> =
        rerank_stage_b(&img_b, &text_b, policy.top_k)?.into_iter().map(|(i, _)| stage_a[i]).collect();

    let needs_matrix = policy.mode != SelectMode::Rank1;
    let (matrix, rows) = if needs_matrix {
        let rows: Vec<usize> = match policy.rotation_scope {
            RotationScope::TopK => stage_b.clone(),
            RotationScope::All => (0..set.candidates.len()).collect(),
        };
        let rot_keys: Vec<String> =
            (0..ROTATIONS as u32).map(|n| rotation_key(image_key, n * ROTATION_STEP_DEGREES)).collect();
        let rotated = provider.embed_image(&rot_keys, &policy.model_b)?;
        let texts: Vec<String> = rows.iter().map(|&i| set.candidates[i].clone()).collect();
        let text_emb = provider.embed_text(&texts, &policy.model_b)?;
        (Some(RotationSimilarityMatrix::from_embeddings(&text_emb, &rotated)?), rows)
    } else {
        (None, Vec::new())
    };
    let m = matrix.as_ref().map(|m| (m, rows.as_slice()));
    let caption = select_final_caption(set, &stage_b, m, policy.mode, seed)?.to_string();
    let rotation_invariant = m.map(|(m, rows)| set.candidates[rows[rotation_invariant_select(m)]].clone());
    Ok(CaptionChoice {
        image_id: set.image_id.clone(),
        caption,
        rank1: set.candidates[stage_b[0]].clone(),
        rotation_invariant,
        stage_b_order: stage_b,
    })
}
