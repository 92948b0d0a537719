//! Retrieval recall and zero-shot classification over precomputed embeddings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{check_uniform, EmbedError, EmbeddingProvider, EmbeddingVector};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("caption {0} maps to unknown image {1}")]
    UnknownImage(String, String),
    #[error("caption {0} appears more than once in the ground truth")]
    DuplicateCaption(String),
    #[error("caption {0} has no ground-truth image")]
    UnmappedCaption(String),
    #[error("matrix is {rows}x{cols}, ground truth is {images}x{captions}")]
    Shape { rows: usize, cols: usize, images: usize, captions: usize },
    #[error("unknown label '{0}'")]
    UnknownLabel(String),
    #[error("prompt set: {0}")]
    Prompts(String),
    #[error("labels and images differ in length ({0} vs {1})")]
    LabelCount(usize, usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major `images x texts` cosine matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Self { rows: rows.len(), cols, values: rows.into_iter().flatten().collect() }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn similarity_matrix(images: &[EmbeddingVector], texts: &[EmbeddingVector]) -> Result<SimilarityMatrix, EvalError> {
    check_uniform(images.iter().chain(texts))?;
    let unit = |v: &EmbeddingVector| -> Vec<f64> {
        let n = v.norm();
        v.values.iter().map(|&x| x as f64 / n).collect()
    };
    for v in images.iter().chain(texts) {
        if v.norm() == 0.0 {
            return Err(EmbedError::ZeroNorm.into());
        }
    }
    let ti: Vec<Vec<f64>> = texts.iter().map(unit).collect();
    let values: Vec<f64> = images
        .par_iter()
        .flat_map_iter(|img| {
            let a = unit(img);
            ti.iter().map(move |t| a.iter().zip(t).map(|(x, y)| x * y).sum::<f64>()).collect::<Vec<_>>()
        })
        .collect();
    Ok(SimilarityMatrix { rows: images.len(), cols: texts.len(), values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    I2t,
    T2i,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalGroundTruth {
    pub image_ids: Vec<String>,
    pub caption_ids: Vec<String>,
    /// Image index for each caption.
    pub caption_image: Vec<usize>,
}

impl RetrievalGroundTruth {
    /// `pairs` maps caption id to image id. Every caption must be mapped exactly once.
    pub fn new(
        image_ids: Vec<String>,
        caption_ids: Vec<String>,
        pairs: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, EvalError> {
        let image_index: HashMap<&str, usize> = image_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut map: HashMap<String, usize> = HashMap::new();
        for (cap, img) in pairs {
            let &idx = image_index.get(img.as_str()).ok_or_else(|| EvalError::UnknownImage(cap.clone(), img.clone()))?;
            if map.insert(cap.clone(), idx).is_some() {
                return Err(EvalError::DuplicateCaption(cap));
            }
        }
        let caption_image = caption_ids
            .iter()
            .map(|c| map.get(c).copied().ok_or_else(|| EvalError::UnmappedCaption(c.clone())))
            .collect::<Result<_, _>>()?;
        Ok(Self { image_ids, caption_ids, caption_image })
    }

    /// CSV with header `caption_id,image_id`; image and caption order follows first appearance.
    pub fn from_csv<R: std::io::Read>(r: R) -> Result<Self, EvalError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut pairs = Vec::new();
        for row in rdr.records() {
            let row = row?;
            pairs.push((row[0].to_string(), row[1].to_string()));
        }
        let mut images: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        for (_, img) in &pairs {
            if seen.insert(img.clone()) {
                images.push(img.clone());
            }
        }
        let captions = pairs.iter().map(|(c, _)| c.clone()).collect();
        Self::new(images, captions, pairs)
    }

    pub fn load_pairs(path: &Path) -> Result<Vec<(String, String)>, EvalError> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut pairs = Vec::new();
        for row in rdr.records() {
            let row = row?;
            pairs.push((row[0].to_string(), row[1].to_string()));
        }
        Ok(pairs)
    }

    fn check(&self, m: &SimilarityMatrix) -> Result<(), EvalError> {
        if m.rows != self.image_ids.len() || m.cols != self.caption_ids.len() {
            return Err(EvalError::Shape {
                rows: m.rows,
                cols: m.cols,
                images: self.image_ids.len(),
                captions: self.caption_ids.len(),
            });
        }
        Ok(())
    }
}

/// Zero-based rank of `target` among `scores`, higher first, ties by id.
fn rank_of(scores: &[f64], ids: &[String], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && ids[j] < ids[target]))
        .count()
}

pub fn recall_at_k(
    m: &SimilarityMatrix,
    truth: &RetrievalGroundTruth,
    k: usize,
    direction: Direction,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    truth.check(m)?;
    let hits: usize = match direction {
        Direction::I2t => {
            let mut captions_of: Vec<Vec<usize>> = vec![Vec::new(); m.rows];
            for (c, &i) in truth.caption_image.iter().enumerate() {
                captions_of[i].push(c);
            }
            (0..m.rows)
                .into_par_iter()
                .filter(|&i| captions_of[i].iter().any(|&c| rank_of(m.row(i), &truth.caption_ids, c) < k))
                .count()
        }
        Direction::T2i => (0..m.cols)
            .into_par_iter()
            .filter(|&c| {
                let col: Vec<f64> = (0..m.rows).map(|i| m.get(i, c)).collect();
                rank_of(&col, &truth.image_ids, truth.caption_image[c]) < k
            })
            .count(),
    };
    let n = match direction {
        Direction::I2t => m.rows,
        Direction::T2i => m.cols,
    };
    Ok(if n == 0 { 0.0 } else { hits as f64 / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub i2t: BTreeMap<usize, f64>,
    pub t2i: BTreeMap<usize, f64>,
    pub mean_recall: f64,
}

pub fn recall_report(m: &SimilarityMatrix, truth: &RetrievalGroundTruth, ks: &[usize]) -> Result<RecallReport, EvalError> {
    let mut i2t = BTreeMap::new();
    let mut t2i = BTreeMap::new();
    for &k in ks {
        i2t.insert(k, recall_at_k(m, truth, k, Direction::I2t)?);
        t2i.insert(k, recall_at_k(m, truth, k, Direction::T2i)?);
    }
    let all: Vec<f64> = i2t.values().chain(t2i.values()).copied().collect();
    let mean_recall = if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 };
    Ok(RecallReport { i2t, t2i, mean_recall })
}

/// Mean of i2t and t2i recall at 1, 5 and 10.
pub fn mean_recall(m: &SimilarityMatrix, truth: &RetrievalGroundTruth) -> Result<f64, EvalError> {
    Ok(recall_report(m, truth, &[1, 5, 10])?.mean_recall)
}

pub const DEFAULT_CLASS_TEMPLATE: &str = "a satellite image of {class}.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPromptSet {
    pub classes: Vec<String>,
    #[serde(default = "default_templates")]
    pub templates: Vec<String>,
    /// Per-class template overrides.
    #[serde(default)]
    pub overrides: BTreeMap<String, Vec<String>>,
}

fn default_templates() -> Vec<String> {
    vec![DEFAULT_CLASS_TEMPLATE.to_string()]
}

impl ClassPromptSet {
    pub fn new(classes: Vec<String>, templates: Vec<String>) -> Result<Self, EvalError> {
        let set = Self { classes, templates, overrides: BTreeMap::new() };
        set.validate()?;
        Ok(set)
    }

    pub fn with_default_template(classes: Vec<String>) -> Result<Self, EvalError> {
        Self::new(classes, default_templates())
    }

    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let set: Self = toml::from_str(text).map_err(|e| EvalError::Prompts(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.classes.is_empty() {
            return Err(EvalError::Prompts("no classes".into()));
        }
        let unique: BTreeSet<&String> = self.classes.iter().collect();
        if unique.len() != self.classes.len() {
            return Err(EvalError::Prompts("class names must be unique".into()));
        }
        for (class, templates) in std::iter::once((&String::new(), &self.templates)).chain(&self.overrides) {
            if templates.is_empty() {
                return Err(EvalError::Prompts(format!("no templates for '{class}'")));
            }
            if let Some(t) = templates.iter().find(|t| !t.contains("{class}")) {
                return Err(EvalError::Prompts(format!("template {t:?} lacks {{class}}")));
            }
        }
        if let Some(c) = self.overrides.keys().find(|c| !unique.contains(c)) {
            return Err(EvalError::Prompts(format!("override for unknown class '{c}'")));
        }
        Ok(())
    }

    pub fn prompts_for(&self, class: &str) -> Vec<String> {
        let templates = self.overrides.get(class).unwrap_or(&self.templates);
        templates.iter().map(|t| t.replace("{class}", class)).collect()
    }
}

/// Mean prompt embedding for each class, in class order.
pub fn class_centroids(
    prompts: &ClassPromptSet,
    embedder: &dyn EmbeddingProvider,
    model_id: &str,
) -> Result<Vec<EmbeddingVector>, EvalError> {
    prompts
        .classes
        .iter()
        .map(|c| {
            let embs = embedder.embed_text(&prompts.prompts_for(c), model_id)?;
            let (model, dim) = check_uniform(&embs)?.expect("validated nonempty templates");
            let mut sum = vec![0.0f64; dim];
            for e in &embs {
                for (a, &x) in sum.iter_mut().zip(&e.values) {
                    *a += x as f64;
                }
            }
            let n = embs.len() as f64;
            Ok(EmbeddingVector::new(model, sum.into_iter().map(|x| (x / n) as f32).collect())?)
        })
        .collect()
}

/// Index of the most similar centroid; lowest index on ties.
pub fn predict(images: &[EmbeddingVector], centroids: &[EmbeddingVector]) -> Result<Vec<usize>, EvalError> {
    let m = similarity_matrix(images, centroids)?;
    Ok((0..m.rows)
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

pub fn zero_shot_top1(
    images: &[EmbeddingVector],
    labels: &[String],
    prompts: &ClassPromptSet,
    embedder: &dyn EmbeddingProvider,
    model_id: &str,
) -> Result<f64, EvalError> {
    let centroids = class_centroids(prompts, embedder, model_id)?;
    top1_accuracy(images, labels, &prompts.classes, &centroids)
}

pub fn top1_accuracy(
    images: &[EmbeddingVector],
    labels: &[String],
    classes: &[String],
    centroids: &[EmbeddingVector],
) -> Result<f64, EvalError> {
    if images.len() != labels.len() {
        return Err(EvalError::LabelCount(labels.len(), images.len()));
    }
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let truth = labels
        .iter()
        .map(|l| index.get(l.as_str()).copied().ok_or_else(|| EvalError::UnknownLabel(l.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    if images.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(images, centroids)?;
    let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::TestEmbedder;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(values: Vec<f32>) -> EmbeddingVector {
        EmbeddingVector::new("m", values).unwrap()
    }

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:02}")).collect()
    }

    fn truth(images: usize, per: usize) -> RetrievalGroundTruth {
        let img = ids("i", images);
        let cap = ids("c", images * per);
        let pairs: Vec<(String, String)> = (0..images * per).map(|c| (cap[c].clone(), img[c / per].clone())).collect();
        RetrievalGroundTruth::new(img, cap, pairs).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let a = v(vec![0.3, 0.4]);
        let m = similarity_matrix(&[a.clone()], &[a]).unwrap();
        assert!((m.get(0, 0) - 1.0).abs() < 1e-12);
        let m = similarity_matrix(&[v(vec![1.0, 0.0])], &[v(vec![1.0, 0.0]), v(vec![0.0, 1.0])]).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = |rng: &mut ChaCha8Rng| v((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let imgs: Vec<_> = (0..8).map(|_| r(&mut rng)).collect();
        let txts: Vec<_> = (0..8).map(|_| r(&mut rng)).collect();
        let m = similarity_matrix(&imgs, &txts).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = imgs[i].values.iter().zip(&txts[j].values).map(|(a, b)| *a as f64 * *b as f64).sum();
                assert!((m.get(i, j) - dot / (imgs[i].norm() * txts[j].norm())).abs() < 1e-6);
            }
        }
        assert!(similarity_matrix(&[v(vec![1.0])], &[v(vec![1.0, 0.0])]).is_err());
    }

    /// Full-sort oracle: materialize the ordering and look for ground truth in the prefix.
    fn oracle_recall(m: &SimilarityMatrix, t: &RetrievalGroundTruth, k: usize, d: Direction) -> f64 {
        let order = |scores: Vec<(f64, &String, usize)>| {
            let mut s = scores;
            s.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            s.into_iter().map(|x| x.2).collect::<Vec<_>>()
        };
        match d {
            Direction::I2t => {
                let mut hits = 0;
                for i in 0..m.rows {
                    let ranked = order((0..m.cols).map(|j| (m.get(i, j), &t.caption_ids[j], j)).collect());
                    if ranked.iter().take(k).any(|&j| t.caption_image[j] == i) {
                        hits += 1;
                    }
                }
                hits as f64 / m.rows as f64
            }
            Direction::T2i => {
                let mut hits = 0;
                for j in 0..m.cols {
                    let ranked = order((0..m.rows).map(|i| (m.get(i, j), &t.image_ids[i], i)).collect());
                    if ranked.iter().take(k).any(|&i| i == t.caption_image[j]) {
                        hits += 1;
                    }
                }
                hits as f64 / m.cols as f64
            }
        }
    }

    #[test]
    fn recall_identity_and_large_k() {
        let t = truth(3, 2);
        let rows: Vec<Vec<f64>> = (0..3).map(|i| (0..6).map(|j| if j / 2 == i { 0.9 } else { 0.1 }).collect()).collect();
        let m = SimilarityMatrix::from_rows(rows);
        assert_eq!(recall_at_k(&m, &t, 1, Direction::I2t).unwrap(), 1.0);
        assert_eq!(recall_at_k(&m, &t, 1, Direction::T2i).unwrap(), 1.0);
        let noisy = SimilarityMatrix::from_rows(vec![vec![0.0; 6]; 3]);
        assert_eq!(recall_at_k(&noisy, &t, 6, Direction::I2t).unwrap(), 1.0);
        assert_eq!(recall_at_k(&noisy, &t, 3, Direction::T2i).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&m, &t, 0, Direction::I2t), Err(EvalError::ZeroK)));
    }

    #[test]
    fn recall_crafted_3x6() {
        let t = truth(3, 2);
        // Captions c00,c01 -> i00; c02,c03 -> i01; c04,c05 -> i02.
        let m = SimilarityMatrix::from_rows(vec![
            vec![0.2, 0.9, 0.8, 0.1, 0.0, 0.3],
            vec![0.7, 0.1, 0.2, 0.3, 0.6, 0.5],
            vec![0.4, 0.4, 0.1, 0.9, 0.5, 0.2],
        ]);
        // i2t top1: i00 -> c01 (hit); i01 -> c00 (miss); i02 -> c03 (miss).
        assert!((recall_at_k(&m, &t, 1, Direction::I2t).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // i2t top5: i01 ranks c00,c04,c05,c03,c02 -> hit; i02 ranks c03,c04,... -> hit.
        assert_eq!(recall_at_k(&m, &t, 5, Direction::I2t).unwrap(), 1.0);
        // t2i top1 per caption: c00->i01 x, c01->i00 ok, c02->i00 x, c03->i02 x, c04->i01 x, c05->i01 x.
        assert!((recall_at_k(&m, &t, 1, Direction::T2i).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        // t2i top2: c00 [i01,i02] x, c01 ok, c02 [i00,i01] ok, c03 [i02,i01] ok, c04 [i01,i02] ok, c05 [i01,i00] x.
        assert!((recall_at_k(&m, &t, 2, Direction::T2i).unwrap() - 4.0 / 6.0).abs() < 1e-12);
        for k in 1..=6 {
            for d in [Direction::I2t, Direction::T2i] {
                assert!((recall_at_k(&m, &t, k, d).unwrap() - oracle_recall(&m, &t, k, d)).abs() < 1e-9);
            }
        }
        let expect = (1.0 / 3.0 + 1.0 + 1.0 + 1.0 / 6.0 + 1.0 + 1.0) / 6.0;
        assert!((mean_recall(&m, &t).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn tie_break_by_id() {
        let t = truth(2, 1);
        let m = SimilarityMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        // i00 ranks c00 first (lower id) -> hit; i01 ranks c00 first -> miss.
        assert_eq!(recall_at_k(&m, &t, 1, Direction::I2t).unwrap(), 0.5);
    }

    #[test]
    fn mean_recall_arithmetic() {
        let t = truth(3, 1);
        let m = SimilarityMatrix::from_rows((0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect());
        assert_eq!(mean_recall(&m, &t).unwrap(), 1.0);
        let r = RecallReport { i2t: BTreeMap::new(), t2i: BTreeMap::new(), mean_recall: [0.0, 0.0, 0.0, 1.0, 1.0, 1.0].iter().sum::<f64>() / 6.0 };
        assert_eq!(r.mean_recall, 0.5);
    }

    #[test]
    fn ground_truth_from_csv() {
        let t = RetrievalGroundTruth::from_csv("caption_id,image_id\nc1,a\nc2,a\nc3,b\n".as_bytes()).unwrap();
        assert_eq!(t.image_ids, ["a", "b"]);
        assert_eq!(t.caption_image, [0, 0, 1]);
        assert!(RetrievalGroundTruth::from_csv("caption_id,image_id\nc1,a\nc1,b\n".as_bytes()).is_err());
    }

    #[test]
    fn zero_shot_examples() {
        let axis = |i: usize| v((0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect());
        let classes: Vec<String> = ["forest", "river", "airport"].map(String::from).to_vec();
        let centroids: Vec<_> = (0..3).map(axis).collect();
        assert_eq!(top1_accuracy(&centroids, &classes, &classes, &centroids).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for n in 0..30 {
            let c = n % 3;
            let mut vals: Vec<f32> = (0..3).map(|j| if j == c { 1.0 } else { 0.0 }).collect();
            for x in vals.iter_mut() {
                *x += rng.random_range(-0.1..0.1);
            }
            images.push(v(vals));
            // Planted misassignment: one image carries the wrong label.
            labels.push(classes[if n == 7 { (c + 1) % 3 } else { c }].clone());
        }
        assert!((top1_accuracy(&images, &labels, &classes, &centroids).unwrap() - 29.0 / 30.0).abs() < 1e-12);

        let scaled: Vec<_> = centroids.iter().enumerate().map(|(i, c)| v(c.values.iter().map(|x| x * (i as f32 + 0.5) * 7.0).collect())).collect();
        assert_eq!(predict(&images, &scaled).unwrap(), predict(&images, &centroids).unwrap());

        assert!(matches!(top1_accuracy(&images[..1], &["lake".to_string()], &classes, &centroids), Err(EvalError::UnknownLabel(_))));

        let provider = TestEmbedder::new(16);
        let one = ClassPromptSet::with_default_template(vec!["harbor".into()]).unwrap();
        let c = class_centroids(&one, &provider, "m").unwrap();
        assert_eq!(zero_shot_top1(&c, &["harbor".to_string()], &one, &provider, "m").unwrap(), 1.0);
        assert_eq!(one.prompts_for("harbor"), ["a satellite image of harbor."]);
    }

    #[test]
    fn prompt_set_validation() {
        assert!(ClassPromptSet::new(vec!["a".into(), "a".into()], default_templates()).is_err());
        assert!(ClassPromptSet::new(vec!["a".into()], vec![]).is_err());
        let toml = "classes = [\"forest\", \"beach\"]\ntemplates = [\"an aerial photo of {class}.\"]\n";
        assert_eq!(ClassPromptSet::from_toml(toml).unwrap().prompts_for("beach"), ["an aerial photo of beach."]);
    }

    fn random_instance(seed: u64, images: usize, captions: usize) -> (SimilarityMatrix, RetrievalGroundTruth) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ids("i", images);
        let cap = ids("c", captions);
        let pairs: Vec<(String, String)> =
            (0..captions).map(|c| (cap[c].clone(), img[if c < images { c } else { rng.random_range(0..images) }].clone())).collect();
        let t = RetrievalGroundTruth::new(img, cap, pairs).unwrap();
        // Quantized scores make ties common.
        let rows = (0..images).map(|_| (0..captions).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect()).collect();
        (SimilarityMatrix::from_rows(rows), t)
    }

    #[test]
    fn random_32x64_matches_oracle() {
        for seed in 0..5 {
            let (m, t) = random_instance(seed, 32, 64);
            for k in [1, 5, 10] {
                for d in [Direction::I2t, Direction::T2i] {
                    assert!((recall_at_k(&m, &t, k, d).unwrap() - oracle_recall(&m, &t, k, d)).abs() < 1e-9);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_k(seed in any::<u64>()) {
            let (m, t) = random_instance(seed, 6, 12);
            for d in [Direction::I2t, Direction::T2i] {
                let mut prev = 0.0;
                for k in 1..=12 {
                    let r = recall_at_k(&m, &t, k, d).unwrap();
                    prop_assert!(r >= prev);
                    prev = r;
                }
            }
        }

        #[test]
        fn permutation_invariant(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            // Distinct scores so id-based tie-breaking cannot interact with the permutation.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, t) = random_instance(seed, 5, 9);
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..9).map(|_| rng.random::<f64>()).collect()).collect();
            let m = SimilarityMatrix::from_rows(rows.clone());
            let mut pi: Vec<usize> = (0..5).collect();
            let mut pc: Vec<usize> = (0..9).collect();
            pi.shuffle(&mut rng);
            pc.shuffle(&mut rng);
            let pm = SimilarityMatrix::from_rows(pi.iter().map(|&i| pc.iter().map(|&c| rows[i][c]).collect()).collect());
            let img: Vec<String> = pi.iter().map(|&i| t.image_ids[i].clone()).collect();
            let cap: Vec<String> = pc.iter().map(|&c| t.caption_ids[c].clone()).collect();
            let pairs = (0..9).map(|c| (t.caption_ids[c].clone(), t.image_ids[t.caption_image[c]].clone()));
            let pt = RetrievalGroundTruth::new(img, cap, pairs).unwrap();
            for k in [1, 2, 5] {
                for d in [Direction::I2t, Direction::T2i] {
                    prop_assert!((recall_at_k(&m, &t, k, d).unwrap() - recall_at_k(&pm, &pt, k, d).unwrap()).abs() < 1e-12);
                }
            }
        }
    }
}
