//! Exact-URL and near-duplicate removal.
//!
//! Near duplicates are the connected components of a cosine kNN graph over
//! image embeddings. Each component keeps one record, chosen by source
//! priority: laioncoco members are never preferred, laion2b/laion400m/coyo700m
//! members are, and anything left is a seeded uniform pick.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{check_uniform, EmbedError, EmbeddingVector};
use crate::model::{Disposition, ManifestLine, Source, SourceRecord, Stage, StageOutput};

#[derive(Debug, thiserror::Error)]
pub enum DedupError {
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error("missing embeddings for {0:?}")]
    MissingEmbeddings(Vec<String>),
    #[error("empty cluster")]
    EmptyCluster,
    #[error("invalid dedup policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupPolicy {
    pub k: usize,
    pub edge_threshold: f64,
    pub seed: u64,
}

impl Default for DedupPolicy {
    fn default() -> Self {
        Self { k: 5, edge_threshold: 0.96, seed: 0 }
    }
}

impl DedupPolicy {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.k == 0 {
            problems.push("k must be at least 1".to_string());
        }
        if !(self.edge_threshold > -1.0 && self.edge_threshold <= 1.0) {
            problems.push(format!("edge_threshold {} outside (-1, 1]", self.edge_threshold));
        }
        problems
    }
}

/// Lowercases scheme and host, strips default ports and fragments.
/// Unparseable URLs are compared by their trimmed text.
pub fn normalize_url(raw: &str) -> String {
    let trimmed = raw.trim();
    match url::Url::parse(trimmed) {
        Ok(mut u) => {
            u.set_fragment(None);
            u.to_string()
        }
        Err(_) => trimmed.to_string(),
    }
}

/// Keep the first record per normalized URL; lines without URLs pass.
/// Returns (kept, removed) ids in manifest order.
pub fn dedup_urls<'a>(records: impl IntoIterator<Item = &'a SourceRecord>) -> (Vec<String>, Vec<String>) {
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for r in records {
        match &r.url {
            Some(url) if !seen.insert(normalize_url(url)) => removed.push(r.record_id.clone()),
            _ => kept.push(r.record_id.clone()),
        }
    }
    (kept, removed)
}

/// Undirected weighted graph over node indices; edges stored with `a < b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<(usize, usize, f64)>,
}

impl SimilarityGraph {
    pub fn edge_set(&self) -> std::collections::BTreeSet<(usize, usize)> {
        self.edges.iter().map(|&(a, b, _)| (a, b)).collect()
    }
}

/// Exact kNN graph: each node links to its top-k most similar other nodes
/// with similarity ≥ threshold (ties by node order), symmetrized by union.
/// Nodes are ordered by id.
pub fn build_knn_graph(
    embeddings: &BTreeMap<String, EmbeddingVector>,
    policy: &DedupPolicy,
) -> Result<SimilarityGraph, DedupError> {
    let problems = policy.validate();
    if !problems.is_empty() {
        return Err(DedupError::Policy(problems.join("; ")));
    }
    check_uniform(embeddings.values())?;
    let nodes: Vec<String> = embeddings.keys().cloned().collect();
    let unit: Vec<Vec<f64>> = embeddings
        .values()
        .map(|v| {
            let n = v.norm();
            if n < 1e-12 {
                Err(EmbedError::ZeroNorm)
            } else {
                Ok(v.values.iter().map(|&x| x as f64 / n).collect())
            }
        })
        .collect::<Result<_, _>>()?;

    let per_node: Vec<Vec<(usize, usize, f64)>> = (0..nodes.len())
        .into_par_iter()
        .map(|i| {
            let mut sims: Vec<(usize, f64)> = (0..nodes.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let s: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
                    (j, s.clamp(-1.0, 1.0))
                })
                .filter(|&(_, s)| s >= policy.edge_threshold)
                .collect();
            sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            sims.truncate(policy.k);
            sims.into_iter().map(|(j, s)| (i.min(j), i.max(j), s)).collect()
        })
        .collect();

    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (a, b, s) in per_node.into_iter().flatten() {
        edges.entry((a, b)).or_insert(s);
    }
    Ok(SimilarityGraph {
        nodes,
        edges: edges.into_iter().map(|((a, b), s)| (a, b, s)).collect(),
    })
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Components as sorted id lists, ordered by smallest member id.
pub fn connected_components(graph: &SimilarityGraph) -> Vec<Vec<String>> {
    components_of(&graph.nodes, graph.edges.iter().map(|&(a, b, _)| (a, b)))
}

pub fn components_of(nodes: &[String], edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<Vec<String>> {
    let mut uf = UnionFind::new(nodes.len());
    for (a, b) in edges {
        uf.union(a, b);
    }
    let mut groups: HashMap<usize, Vec<String>> = HashMap::new();
    for (i, id) in nodes.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(id.clone());
    }
    let mut clusters: Vec<Vec<String>> = groups
        .into_values()
        .map(|mut c| {
            c.sort();
            c
        })
        .collect();
    clusters.sort();
    clusters
}

const PREFERRED: [Source; 3] = [Source::Laion2b, Source::Laion400m, Source::Coyo700m];

fn cluster_rng(seed: u64, ids: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for id in ids {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Pick the surviving record of a duplicate cluster.
pub fn select_keeper(cluster: &[&SourceRecord], seed: u64) -> Result<String, DedupError> {
    if cluster.is_empty() {
        return Err(DedupError::EmptyCluster);
    }
    let mut members: Vec<&SourceRecord> = cluster.to_vec();
    members.sort_by(|a, b| a.record_id.cmp(&b.record_id));

    let non_coco: Vec<&SourceRecord> =
        members.iter().copied().filter(|r| r.source != Source::Laioncoco).collect();
    let candidates = if non_coco.is_empty() { members.clone() } else { non_coco };
    let preferred: Vec<&SourceRecord> =
        candidates.iter().copied().filter(|r| PREFERRED.contains(&r.source)).collect();
    let pool = if preferred.is_empty() { candidates } else { preferred };
    if pool.len() == 1 {
        return Ok(pool[0].record_id.clone());
    }
    let ids: Vec<&str> = members.iter().map(|r| r.record_id.as_str()).collect();
    let mut rng = cluster_rng(seed, &ids);
    Ok(pool[rng.random_range(0..pool.len())].record_id.clone())
}

/// URL dedup followed by near-duplicate clustering over `embeddings`
/// (keyed by record id). Lines removed upstream pass through uncounted.
pub fn run_dedup(
    lines: Vec<ManifestLine>,
    embeddings: &BTreeMap<String, EmbeddingVector>,
    policy: &DedupPolicy,
) -> Result<StageOutput, DedupError> {
    let active: Vec<&SourceRecord> = lines
        .iter()
        .filter(|l| l.disposition == Disposition::Kept)
        .map(|l| &l.record)
        .collect();
    let (url_kept, url_removed) = dedup_urls(active.iter().copied());
    let url_removed: HashSet<String> = url_removed.into_iter().collect();

    let missing: Vec<String> = url_kept.iter().filter(|id| !embeddings.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(DedupError::MissingEmbeddings(missing));
    }
    let subset: BTreeMap<String, EmbeddingVector> =
        url_kept.iter().map(|id| (id.clone(), embeddings[id].clone())).collect();
    let graph = build_knn_graph(&subset, policy)?;

    let by_id: HashMap<&str, &SourceRecord> = active.iter().map(|r| (r.record_id.as_str(), *r)).collect();
    let mut near_removed = HashSet::new();
    for cluster in connected_components(&graph) {
        if cluster.len() < 2 {
            continue;
        }
        let members: Vec<&SourceRecord> = cluster.iter().map(|id| by_id[id.as_str()]).collect();
        let keeper = select_keeper(&members, policy.seed)?;
        near_removed.extend(cluster.into_iter().filter(|id| *id != keeper));
    }

    let mut out = StageOutput::default();
    for line in lines {
        if line.disposition != Disposition::Kept {
            out.lines.push(line);
            continue;
        }
        let id = line.record.record_id.as_str();
        let d = if url_removed.contains(id) {
            Disposition::RemovedDuplicateUrl
        } else if near_removed.contains(id) {
            Disposition::RemovedDuplicateNear
        } else {
            Disposition::Kept
        };
        out.push(Stage::Dedup, line.record, d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new("m", values.to_vec()).unwrap()
    }

    fn rec(id: &str, source: Source) -> SourceRecord {
        SourceRecord::new(id, source, "x")
    }

    #[test]
    fn url_normalization() {
        assert_eq!(normalize_url(" HTTP://HOST:80/a#frag "), "http://host/a");
        assert_eq!(normalize_url("https://Example.com:443/X"), "https://example.com/X");
        assert_eq!(normalize_url("not a url"), "not a url");
    }

    #[test]
    fn url_dedup_examples() {
        let a = rec("a", Source::Wit).with_url("HTTP://HOST/a");
        let b = rec("b", Source::Wit).with_url("http://host/a");
        assert_eq!(dedup_urls([&a, &b]), (vec!["a".into()], vec!["b".into()]));

        let c = rec("c", Source::Wit).with_url("http://host/c");
        assert_eq!(dedup_urls([&a, &c]).0.len(), 2);

        let recs = [
            rec("r1", Source::Wit).with_url("http://h/1"),
            rec("r2", Source::Wit).with_url("http://h/2"),
            rec("r3", Source::Fmow),
            rec("r4", Source::Wit).with_url("http://H/1"),
            rec("r5", Source::Wit).with_url("http://h/5"),
        ];
        let (kept, removed) = dedup_urls(recs.iter());
        assert_eq!(kept, ["r1", "r2", "r3", "r5"]);
        assert_eq!(removed, ["r4"]);
    }

    #[test]
    fn identical_and_orthogonal_pairs() {
        let p = DedupPolicy { edge_threshold: 0.9, ..DedupPolicy::default() };
        let e: BTreeMap<_, _> = [("a".to_string(), v(&[1.0, 0.0])), ("b".to_string(), v(&[1.0, 0.0]))].into();
        let g = build_knn_graph(&e, &p).unwrap();
        assert_eq!(g.edges, vec![(0, 1, 1.0)]);

        let p = DedupPolicy { edge_threshold: 0.5, ..DedupPolicy::default() };
        let e: BTreeMap<_, _> = [("a".to_string(), v(&[1.0, 0.0])), ("b".to_string(), v(&[0.0, 1.0]))].into();
        assert!(build_knn_graph(&e, &p).unwrap().edges.is_empty());
    }

    #[test]
    fn mixed_models_rejected() {
        let e: BTreeMap<_, _> = [
            ("a".to_string(), v(&[1.0, 0.0])),
            ("b".to_string(), EmbeddingVector::new("other", vec![1.0, 0.0]).unwrap()),
        ]
        .into();
        assert!(matches!(build_knn_graph(&e, &DedupPolicy::default()), Err(DedupError::Embedding(EmbedError::MixedModels(..)))));
    }

    #[test]
    fn component_examples() {
        let nodes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(components_of(&nodes, [(0, 1), (1, 2)]), vec![vec!["a", "b", "c"]]);
        assert_eq!(components_of(&nodes, []), vec![vec!["a"], vec!["b"], vec!["c"]]);
    }

    #[test]
    fn keeper_examples() {
        let coco = rec("1", Source::Laioncoco);
        let l2b = rec("2", Source::Laion2b);
        let wit = rec("3", Source::Wit);
        assert_eq!(select_keeper(&[&coco, &l2b, &wit], 9).unwrap(), "2");

        let sbu = rec("4", Source::Sbu);
        let first = select_keeper(&[&wit, &sbu], 42).unwrap();
        for _ in 0..5 {
            assert_eq!(select_keeper(&[&sbu, &wit], 42).unwrap(), first);
        }

        let coco2 = rec("5", Source::Laioncoco);
        let pick = select_keeper(&[&coco, &coco2], 1).unwrap();
        assert!(pick == "1" || pick == "5");
        assert!(matches!(select_keeper(&[], 0), Err(DedupError::EmptyCluster)));
    }

    #[test]
    fn seeded_fallback_varies_with_seed() {
        let recs: Vec<SourceRecord> = (0..8).map(|i| rec(&format!("w{i}"), Source::Wit)).collect();
        let refs: Vec<&SourceRecord> = recs.iter().collect();
        let picks: HashSet<String> = (0..64).map(|s| select_keeper(&refs, s).unwrap()).collect();
        assert!(picks.len() > 1);
    }

    #[test]
    fn run_dedup_cluster_sizes() {
        // Clusters of size 1, 2 and 4 along orthogonal axes.
        let mut lines = Vec::new();
        let mut emb = BTreeMap::new();
        for (axis, size) in [(0usize, 1usize), (1, 2), (2, 4)] {
            for j in 0..size {
                let id = format!("c{axis}-{j}");
                let mut values = vec![0.0f32; 3];
                values[axis] = 1.0;
                emb.insert(id.clone(), v(&values));
                lines.push(ManifestLine::kept(rec(&id, Source::Cc12m)));
            }
        }
        let out = run_dedup(lines.clone(), &emb, &DedupPolicy::default()).unwrap();
        assert_eq!(out.count(Disposition::Kept), 3);
        assert_eq!(out.count(Disposition::RemovedDuplicateNear), 4);
        assert_eq!(out.ledger.verify_conservation(), Ok(()));

        emb.remove("c2-3");
        match run_dedup(lines, &emb, &DedupPolicy::default()) {
            Err(DedupError::MissingEmbeddings(ids)) => assert_eq!(ids, vec!["c2-3".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_singletons_keep_everything() {
        let mut lines = Vec::new();
        let mut emb = BTreeMap::new();
        for i in 0..4 {
            let mut values = vec![0.0f32; 4];
            values[i] = 1.0;
            emb.insert(format!("r{i}"), v(&values));
            lines.push(ManifestLine::kept(rec(&format!("r{i}"), Source::Wit)));
        }
        let out = run_dedup(lines, &emb, &DedupPolicy::default()).unwrap();
        assert_eq!(out.count(Disposition::Kept), 4);
    }
}
