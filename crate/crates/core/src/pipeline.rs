//! Stage runners over manifest files, and `run_all`.
//!
//! Every stage reads a manifest, writes a manifest, and writes a cumulative
//! ledger next to it (`<output>.ledger.json`): the input's ledger, if any,
//! merged with this stage's counters. Wall-clock times go to `run.log.jsonl`
//! in the output directory so the manifests themselves stay reproducible.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::caption::{read_candidates, select_for_image, CaptionChoice};
use crate::config::{PipelineConfig, ProviderKind};
use crate::dedup::run_dedup;
use crate::embed::{ArchiveBuilder, EmbeddingArchive, EmbeddingProvider, EmbeddingVector, RemoteEmbedder, TestEmbedder};
use crate::fetch::{run_fetch, Fetcher};
use crate::geo::{LocationMatcher, ZoneHistogram};
use crate::keywords::{compile_keywords, filter_stream, keyword_histogram, write_histogram_csv, KeywordSet};
use crate::meta::{apply_meta_caption, Gazetteer, MetaTemplateSet};
use crate::model::{read_manifest, write_manifest, Disposition, ManifestLine, PipelineLedger, Source};
use crate::score::{apply_score_filter, clip_score, template_centroid, write_scores_csv, ScorePair, TemplateSet};
use crate::shard::{assign_keys, write_shards, ShardSample};
use crate::store::BlobStore;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("validation failed:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Io { .. } => 2,
            PipelineError::Validation(_) => 3,
            PipelineError::Stage { .. } => 4,
        }
    }
}

impl From<crate::config::ConfigError> for PipelineError {
    fn from(e: crate::config::ConfigError) -> Self {
        match e {
            crate::config::ConfigError::Io { path, source } => PipelineError::Io { path, source },
            crate::config::ConfigError::Invalid(p) => PipelineError::Validation(p),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn stage_err(stage: &'static str) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Stage { stage, message }
}

pub fn ledger_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".ledger.json");
    PathBuf::from(s)
}

/// Read a manifest; any malformed line is a validation error.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestLine>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = Vec::new();
    let mut problems = Vec::new();
    for line in read_manifest(BufReader::new(file)) {
        match line {
            Ok(l) => lines.push(l),
            Err(e) => problems.push(format!("{}: {e}", path.display())),
        }
    }
    let dups = crate::model::duplicate_ids(lines.iter().map(|l| &l.record));
    problems.extend(dups.into_iter().map(|d| format!("{}: duplicate record_id {d}", path.display())));
    if problems.is_empty() {
        Ok(lines)
    } else {
        Err(PipelineError::Validation(problems))
    }
}

fn load_ledger(manifest: &Path) -> Result<PipelineLedger, PipelineError> {
    let p = ledger_path(manifest);
    match std::fs::read_to_string(&p) {
        Ok(text) => PipelineLedger::from_json(&text).map_err(|e| PipelineError::Validation(vec![format!("{}: {e}", p.display())])),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(PipelineLedger::new()),
        Err(e) => Err(io_err(&p)(e)),
    }
}

fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(io_err(path))
}

/// Write the manifest and its cumulative ledger.
fn emit(
    input: &Path,
    output: &Path,
    lines: &[ManifestLine],
    stage_ledger: Option<&PipelineLedger>,
) -> Result<PipelineLedger, PipelineError> {
    ensure_parent(output)?;
    let mut ledger = load_ledger(input)?;
    if let Some(l) = stage_ledger {
        ledger.merge(l);
    }
    let f = File::create(output).map_err(io_err(output))?;
    write_manifest(BufWriter::new(f), lines).map_err(io_err(output))?;
    let lp = ledger_path(output);
    write_text(&lp, &ledger.to_json())?;
    if let Err(v) = ledger.verify_conservation() {
        let msgs = v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ");
        return Err(PipelineError::Stage { stage: "ledger", message: msgs });
    }
    Ok(ledger)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub input: usize,
    pub kept: usize,
    pub removed: BTreeMap<String, usize>,
}

impl StageReport {
    fn of(stage: &str, lines: &[ManifestLine]) -> Self {
        let mut removed = BTreeMap::new();
        let mut kept = 0;
        for l in lines {
            if l.disposition == Disposition::Kept {
                kept += 1;
            } else {
                *removed.entry(l.disposition.as_str().to_string()).or_default() += 1;
            }
        }
        Self { stage: stage.into(), input: lines.len(), kept, removed }
    }
}

#[derive(Serialize)]
struct RunLogEntry<'a> {
    stage: &'a str,
    started_at: String,
    elapsed_ms: u128,
    kept: usize,
    input: usize,
}

fn log_run(dir: &Path, report: &StageReport, started: chrono::DateTime<chrono::Utc>, elapsed: Duration) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("run.log.jsonl");
    let entry = RunLogEntry {
        stage: &report.stage,
        started_at: started.to_rfc3339(),
        elapsed_ms: elapsed.as_millis(),
        kept: report.kept,
        input: report.input,
    };
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
    let line = serde_json::to_string(&entry).expect("log entry serializes");
    writeln!(f, "{line}").map_err(io_err(&path))
}

fn timed<T>(
    output_dir: &Path,
    stage: &str,
    f: impl FnOnce() -> Result<(T, StageReport), PipelineError>,
) -> Result<(T, StageReport), PipelineError> {
    let started = chrono::Utc::now();
    let t = Instant::now();
    let (v, report) = f()?;
    log_run(output_dir, &report, started, t.elapsed())?;
    tracing::info!(stage, kept = report.kept, input = report.input, "stage done");
    Ok((v, report))
}

fn dir_of(path: &Path) -> PathBuf {
    path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf()
}

// ---------------------------------------------------------------- stages

pub struct KeywordsArgs<'a> {
    pub input: &'a Path,
    pub output: &'a Path,
    pub keywords: Option<&'a Path>,
    pub histogram: Option<&'a Path>,
    pub exempt: &'a [Source],
}

pub fn run_keywords(args: &KeywordsArgs) -> Result<StageReport, PipelineError> {
    timed(&dir_of(args.output), "keywords", || {
        let set = match args.keywords {
            Some(p) => KeywordSet::load(p).map_err(|e| PipelineError::Validation(vec![e.to_string()]))?,
            None => KeywordSet::bundled(),
        };
        let matcher = compile_keywords(&set).map_err(|e| PipelineError::Validation(vec![e.to_string()]))?;
        let file = File::open(args.input).map_err(io_err(args.input))?;
        let out = filter_stream(&matcher, read_manifest(BufReader::new(file)), |s| args.exempt.contains(&s));
        if !out.errors.is_empty() {
            return Err(PipelineError::Validation(out.errors.iter().map(|e| e.to_string()).collect()));
        }
        emit(args.input, args.output, &out.lines, Some(&out.ledger))?;
        if let Some(h) = args.histogram {
            let counts = keyword_histogram(&matcher, out.kept().map(|r| r.caption.as_str()));
            ensure_parent(h)?;
            let f = File::create(h).map_err(io_err(h))?;
            write_histogram_csv(f, &counts).map_err(|e| stage_err("keywords")(e.to_string()))?;
        }
        Ok(((), StageReport::of("keywords", &out.lines)))
    })
    .map(|(_, r)| r)
}

pub fn run_fetch_stage(
    input: &Path,
    output: &Path,
    store: &BlobStore,
    config: &PipelineConfig,
) -> Result<StageReport, PipelineError> {
    timed(&dir_of(output), "fetch", || {
        let lines = load_manifest(input)?;
        let fetcher = Fetcher::new(config.fetch.clone(), store.clone()).map_err(|e| PipelineError::Validation(vec![e.to_string()]))?;
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .map_err(|e| stage_err("fetch")(e.to_string()))?;
        let run = rt.block_on(run_fetch(Arc::new(fetcher), lines));
        emit(input, output, &run.output.lines, Some(&run.output.ledger))?;
        write_lines(&sidecar(output, "outcomes.jsonl"), &run.manifest)?;
        Ok(((), StageReport::of("fetch", &run.output.lines)))
    })
    .map(|(_, r)| r)
}

fn sidecar(manifest: &Path, suffix: &str) -> PathBuf {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    dir_of(manifest).join(format!("{stem}.{suffix}"))
}

/// Embedding provider from config, with images resolved in `store`.
pub fn make_provider(config: &PipelineConfig, store: &BlobStore) -> Result<Box<dyn EmbeddingProvider>, PipelineError> {
    match config.embedding.provider {
        ProviderKind::Test => Ok(Box::new(TestEmbedder::with_store(config.embedding.dim, store.clone()))),
        ProviderKind::Remote => {
            let endpoint = config
                .embedding
                .endpoint
                .as_deref()
                .ok_or_else(|| PipelineError::Validation(vec!["embedding.endpoint is required".into()]))?;
            let e = RemoteEmbedder::new(endpoint, Duration::from_millis(config.embedding.timeout_ms), config.embedding.retries)
                .map_err(|e| PipelineError::Validation(vec![e.to_string()]))?;
            Ok(Box::new(e))
        }
    }
}

const EMBED_BATCH: usize = 256;

/// Image embeddings and detector probabilities for every kept record with
/// an image, keyed by record id.
pub fn run_embed(
    input: &Path,
    output: &Path,
    provider: &dyn EmbeddingProvider,
    config: &PipelineConfig,
) -> Result<StageReport, PipelineError> {
    timed(&dir_of(output), "embed", || {
        let lines = load_manifest(input)?;
        let items: Vec<(&str, &str)> = lines
            .iter()
            .filter(|l| l.disposition == Disposition::Kept)
            .filter_map(|l| l.record.image_ref.as_deref().map(|r| (l.record.record_id.as_str(), r)))
            .collect();
        let err = stage_err("embed");
        let mut builder = ArchiveBuilder::new(&config.embedding.model_id, config.embedding.dim);
        for chunk in items.chunks(EMBED_BATCH) {
            let keys: Vec<String> = chunk.iter().map(|(_, r)| r.to_string()).collect();
            let vecs = provider.embed_image(&keys, &config.embedding.model_id).map_err(|e| err(e.to_string()))?;
            let probs = provider
                .detector_probability(&keys, &config.embedding.detector_model)
                .map_err(|e| err(e.to_string()))?;
            for ((id, _), (v, p)) in chunk.iter().zip(vecs.into_iter().zip(probs)) {
                builder.insert(*id, &v, Some(p)).map_err(|e| err(e.to_string()))?;
            }
        }
        let archive = builder.finish().map_err(|e| err(e.to_string()))?;
        ensure_parent(output)?;
        archive.save(output).map_err(|e| err(e.to_string()))?;
        let report = StageReport { stage: "embed".into(), input: lines.len(), kept: archive.len(), removed: BTreeMap::new() };
        Ok(((), report))
    })
    .map(|(_, r)| r)
}

fn load_archive(path: &Path) -> Result<EmbeddingArchive, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Io { path: path.into(), source: std::io::ErrorKind::NotFound.into() });
    }
    EmbeddingArchive::load(path).map_err(|e| PipelineError::Validation(vec![format!("{}: {e}", path.display())]))
}

pub fn run_dedup_stage(
    input: &Path,
    embeddings: &Path,
    output: &Path,
    config: &PipelineConfig,
) -> Result<StageReport, PipelineError> {
    timed(&dir_of(output), "dedup", || {
        let lines = load_manifest(input)?;
        let archive = load_archive(embeddings)?;
        let embs: BTreeMap<String, EmbeddingVector> = archive.iter().map(|(k, v, _)| (k.to_string(), v)).collect();
        let mut policy = config.dedup.clone();
        policy.seed = config.seed;
        let out = run_dedup(lines, &embs, &policy).map_err(|e| stage_err("dedup")(e.to_string()))?;
        emit(input, output, &out.lines, Some(&out.ledger))?;
        Ok(((), StageReport::of("dedup", &out.lines)))
    })
    .map(|(_, r)| r)
}

pub struct ScoreArgs<'a> {
    pub input: &'a Path,
    pub embeddings: &'a Path,
    pub output: &'a Path,
    pub scores_csv: Option<&'a Path>,
    pub templates: Option<&'a Path>,
}

pub fn run_score_filter(
    args: &ScoreArgs,
    provider: &dyn EmbeddingProvider,
    config: &PipelineConfig,
) -> Result<StageReport, PipelineError> {
    timed(&dir_of(args.output), "score-filter", || {
        let err = stage_err("score-filter");
        let lines = load_manifest(args.input)?;
        let archive = load_archive(args.embeddings)?;
        let templates = match args.templates {
            Some(p) => TemplateSet::load(p).map_err(|e| PipelineError::Validation(vec![e.to_string()]))?,
            None => TemplateSet::bundled(),
        };
        let text = provider.embed_text(&templates.templates, archive.model_id()).map_err(|e| err(e.to_string()))?;
        let centroid = template_centroid(&text).map_err(|e| err(e.to_string()))?;
        let exempt = config.exempt();
        let mut pairs = BTreeMap::new();
        for l in &lines {
            if l.disposition != Disposition::Kept || exempt.contains(&l.record.source) {
                continue;
            }
            let id = &l.record.record_id;
            let (v, p) = archive.lookup(id).map_err(|e| err(format!("{id}: {e}")))?;
            let s = clip_score(&centroid, &v).map_err(|e| err(e.to_string()))?.clamp(-1.0, 1.0);
            let c = p.ok_or_else(|| err(format!("{id}: archive has no detector probability")))? as f64;
            pairs.insert(id.clone(), ScorePair { s, c });
        }
        let out = apply_score_filter(lines, &pairs, &config.filter, false).map_err(|e| err(e.to_string()))?;
        emit(args.input, args.output, &out.lines, Some(&out.ledger))?;
        if let Some(csv) = args.scores_csv {
            let kept: std::collections::BTreeSet<String> = out.kept().map(|r| r.record_id.clone()).collect();
            ensure_parent(csv)?;
            let f = File::create(csv).map_err(io_err(csv))?;
            write_scores_csv(f, &pairs, &kept).map_err(|e| err(e.to_string()))?;
        }
        Ok(((), StageReport::of("score-filter", &out.lines)))
    })
    .map(|(_, r)| r)
}

/// Replace captions of kept records that have candidates with the selected one.
pub fn run_caption_select(
    input: &Path,
    candidates: &Path,
    output: &Path,
    provider: &dyn EmbeddingProvider,
    config: &PipelineConfig,
) -> Result<StageReport, PipelineError> {
    timed(&dir_of(output), "caption-select", || {
        let err = stage_err("caption-select");
        let mut lines = load_manifest(input)?;
        let f = File::open(candidates).map_err(io_err(candidates))?;
        let sets = read_candidates(BufReader::new(f)).map_err(|e| PipelineError::Validation(vec![e.to_string()]))?;
        let by_id: HashMap<&str, _> = sets.iter().map(|s| (s.image_id.as_str(), s)).collect();
        let mut choices: Vec<CaptionChoice> = Vec::new();
        for l in lines.iter_mut().filter(|l| l.disposition == Disposition::Kept) {
            let Some(set) = by_id.get(l.record.record_id.as_str()) else { continue };
            let key = l
                .record
                .image_ref
                .clone()
                .ok_or_else(|| err(format!("{} has candidates but no image", l.record.record_id)))?;
            let choice = select_for_image(provider, set, &key, &config.caption, config.seed).map_err(|e| err(e.to_string()))?;
            l.record.caption = choice.caption.clone();
            choices.push(choice);
        }
        emit(input, output, &lines, None)?;
        write_lines(&sidecar(output, "choices.jsonl"), &choices)?;
        let report = StageReport { stage: "caption-select".into(), input: lines.len(), kept: choices.len(), removed: BTreeMap::new() };
        Ok(((), report))
    })
    .map(|(_, r)| r)
}

fn load_gazetteer(path: Option<&Path>) -> Result<Option<Gazetteer>, PipelineError> {
    path.map(|p| {
        if !p.exists() {
            return Err(PipelineError::Io { path: p.into(), source: std::io::ErrorKind::NotFound.into() });
        }
        Gazetteer::load(p).map_err(|e| PipelineError::Validation(vec![format!("{}: {e}", p.display())]))
    })
    .transpose()
}

pub fn run_meta_caption(
    input: &Path,
    output: &Path,
    templates: Option<&Path>,
    gazetteer: Option<&Path>,
) -> Result<StageReport, PipelineError> {
    timed(&dir_of(output), "meta-caption", || {
        let mut lines = load_manifest(input)?;
        let templates = match templates {
            Some(p) => MetaTemplateSet::load(p).map_err(|e| PipelineError::Validation(vec![e.to_string()]))?,
            None => MetaTemplateSet::bundled(),
        };
        let gaz = load_gazetteer(gazetteer)?;
        let mut touched = 0;
        for l in lines.iter_mut().filter(|l| l.disposition == Disposition::Kept) {
            if l.record.meta.is_some() {
                apply_meta_caption(&mut l.record, &templates, gaz.as_ref());
                touched += 1;
            }
        }
        emit(input, output, &lines, None)?;
        let report = StageReport { stage: "meta-caption".into(), input: lines.len(), kept: touched, removed: BTreeMap::new() };
        Ok(((), report))
    })
    .map(|(_, r)| r)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeoReport {
    pub records: usize,
    pub with_coordinates: usize,
    pub zones: ZoneHistogram,
    pub long_tail: Vec<(String, u64)>,
    pub captions_with_locations: usize,
    pub locations: BTreeMap<String, u64>,
}

pub fn run_geo_report(
    input: &Path,
    report_path: &Path,
    csv_path: Option<&Path>,
    gazetteer: Option<&Path>,
) -> Result<StageReport, PipelineError> {
    timed(&dir_of(report_path), "geo-report", || {
        let lines = load_manifest(input)?;
        let gaz = load_gazetteer(gazetteer)?;
        let matcher = gaz.as_ref().map(|g| LocationMatcher::new(g.names()));
        let mut report = GeoReport::default();
        for r in lines.iter().filter(|l| l.disposition == Disposition::Kept).map(|l| &l.record) {
            report.records += 1;
            if let Some((lon, lat)) = r.meta.as_ref().and_then(|m| Some((m.lon?, m.lat?))) {
                report.with_coordinates += 1;
                report.zones.add(lon, lat);
            }
            if let Some(m) = &matcher {
                let found = m.extract(&r.caption);
                if !found.is_empty() {
                    report.captions_with_locations += 1;
                }
                for name in found {
                    *report.locations.entry(name).or_default() += 1;
                }
            }
        }
        report.long_tail = report.zones.sorted();
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_text(report_path, &(json + "\n"))?;
        if let Some(p) = csv_path {
            ensure_parent(p)?;
            let f = File::create(p).map_err(io_err(p))?;
            report.zones.write_csv(f).map_err(|e| stage_err("geo-report")(e.to_string()))?;
        }
        let sr = StageReport { stage: "geo-report".into(), input: lines.len(), kept: report.records, removed: BTreeMap::new() };
        Ok(((), sr))
    })
    .map(|(_, r)| r)
}

#[derive(Serialize)]
struct SampleMeta<'a> {
    record_id: &'a str,
    source: Source,
    #[serde(skip_serializing_if = "Option::is_none")]
    url: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<&'a crate::meta::MetaRecord>,
}

pub fn run_shard(
    input: &Path,
    store: &BlobStore,
    out_dir: &Path,
    config: &PipelineConfig,
) -> Result<(StageReport, Vec<String>), PipelineError> {
    timed(out_dir, "shard", || {
        let err = stage_err("shard");
        let lines = load_manifest(input)?;
        let kept: Vec<&ManifestLine> = lines.iter().filter(|l| l.disposition == Disposition::Kept).collect();
        let keys = assign_keys(kept.iter().map(|l| l.record.record_id.as_str())).map_err(|e| PipelineError::Validation(vec![e.to_string()]))?;
        let mut samples = Vec::with_capacity(kept.len());
        for (l, key) in kept.iter().zip(keys) {
            let r = &l.record;
            let digest = r.image_ref.as_deref().ok_or_else(|| err(format!("{} has no image", r.record_id)))?;
            let image = store.get(digest).map_err(|e| err(format!("{}: {e}", r.record_id)))?;
            let meta = serde_json::to_vec(&SampleMeta { record_id: &r.record_id, source: r.source, url: r.url.as_deref(), meta: r.meta.as_ref() })
                .expect("meta serializes");
            samples.push(ShardSample { key, image, caption: r.caption.clone(), meta });
        }
        let index = write_shards(&samples, &config.shard, out_dir).map_err(|e| err(e.to_string()))?;
        index.write_csv(&out_dir.join("index.csv")).map_err(|e| err(e.to_string()))?;
        for w in &index.warnings {
            tracing::warn!("{w}");
        }
        let report = StageReport { stage: "shard".into(), input: lines.len(), kept: samples.len(), removed: BTreeMap::new() };
        Ok((index.warnings, report))
    })
    .map(|(w, r)| (r, w))
}

// ---------------------------------------------------------------- run-all

/// Output locations under the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn keywords(&self) -> PathBuf {
        self.dir.join("keywords.jsonl")
    }
    pub fn keyword_histogram(&self) -> PathBuf {
        self.dir.join("keywords.histogram.csv")
    }
    pub fn fetch(&self) -> PathBuf {
        self.dir.join("fetch.jsonl")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.dir.join("embeddings.rsemb")
    }
    pub fn dedup(&self) -> PathBuf {
        self.dir.join("dedup.jsonl")
    }
    pub fn score_filter(&self) -> PathBuf {
        self.dir.join("score_filter.jsonl")
    }
    pub fn scores(&self) -> PathBuf {
        self.dir.join("scores.csv")
    }
    pub fn caption_select(&self) -> PathBuf {
        self.dir.join("caption_select.jsonl")
    }
    pub fn meta_caption(&self) -> PathBuf {
        self.dir.join("meta_caption.jsonl")
    }
    pub fn geo_report(&self) -> PathBuf {
        self.dir.join("geo_report.json")
    }
    pub fn zones(&self) -> PathBuf {
        self.dir.join("zones.csv")
    }
    pub fn shards(&self) -> PathBuf {
        self.dir.join("shards")
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunSummary {
    pub reports: Vec<StageReport>,
    pub ledger: PipelineLedger,
}

pub fn blob_store(config: &PipelineConfig, layout: &Layout) -> BlobStore {
    BlobStore::new(config.paths.blob_store.clone().unwrap_or_else(|| layout.dir.join("blobs")))
}

/// keywords, fetch, embed, dedup, score-filter, caption-select, meta-caption, geo-report, shard.
pub fn run_all(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    let mut problems = config.validate();
    problems.extend(config.check_inputs(&[("input", config.paths.input.as_deref())]));
    for (name, p) in [
        ("keywords", &config.paths.keywords),
        ("templates", &config.paths.templates),
        ("meta_templates", &config.paths.meta_templates),
        ("gazetteer", &config.paths.gazetteer),
        ("candidates", &config.paths.candidates),
    ] {
        if p.is_some() {
            problems.extend(config.check_inputs(&[(name, p.as_deref())]));
        }
    }
    if !problems.is_empty() {
        // Missing input files are I/O failures.
        if problems.iter().all(|p| p.contains("does not exist")) {
            let path = config.paths.input.clone().unwrap_or_default();
            return Err(PipelineError::Io { path, source: std::io::Error::new(std::io::ErrorKind::NotFound, problems.join("; ")) });
        }
        return Err(PipelineError::Validation(problems));
    }
    let input = config.paths.input.clone().expect("checked");
    let layout = Layout::new(config.paths.work_dir.clone().unwrap_or_else(|| PathBuf::from("work")));
    std::fs::create_dir_all(&layout.dir).map_err(io_err(&layout.dir))?;
    let store = blob_store(config, &layout);
    let exempt = config.exempt();
    let mut reports = Vec::new();

    reports.push(run_keywords(&KeywordsArgs {
        input: &input,
        output: &layout.keywords(),
        keywords: config.paths.keywords.as_deref(),
        histogram: Some(&layout.keyword_histogram()),
        exempt: &exempt,
    })?);
    reports.push(run_fetch_stage(&layout.keywords(), &layout.fetch(), &store, config)?);
    let provider = make_provider(config, &store)?;
    match &config.paths.image_embeddings {
        Some(p) => {
            std::fs::copy(p, layout.embeddings()).map_err(io_err(p))?;
        }
        None => reports.push(run_embed(&layout.fetch(), &layout.embeddings(), provider.as_ref(), config)?),
    }
    reports.push(run_dedup_stage(&layout.fetch(), &layout.embeddings(), &layout.dedup(), config)?);
    reports.push(run_score_filter(
        &ScoreArgs {
            input: &layout.dedup(),
            embeddings: &layout.embeddings(),
            output: &layout.score_filter(),
            scores_csv: Some(&layout.scores()),
            templates: config.paths.templates.as_deref(),
        },
        provider.as_ref(),
        config,
    )?);
    let mut last = layout.score_filter();
    if let Some(c) = &config.paths.candidates {
        reports.push(run_caption_select(&last, c, &layout.caption_select(), provider.as_ref(), config)?);
        last = layout.caption_select();
    }
    reports.push(run_meta_caption(&last, &layout.meta_caption(), config.paths.meta_templates.as_deref(), config.paths.gazetteer.as_deref())?);
    reports.push(run_geo_report(&layout.meta_caption(), &layout.geo_report(), Some(&layout.zones()), config.paths.gazetteer.as_deref())?);
    let (shard_report, _) = run_shard(&layout.meta_caption(), &store, &layout.shards(), config)?;
    reports.push(shard_report);
    let ledger = load_ledger(&layout.meta_caption())?;
    Ok(RunSummary { reports, ledger })
}

// ---------------------------------------------------------------- eval

fn vectors_for(archive: &EmbeddingArchive, ids: &[String], what: &str) -> Result<Vec<EmbeddingVector>, PipelineError> {
    ids.iter()
        .map(|id| archive.lookup(id).map(|(v, _)| v).map_err(|e| PipelineError::Validation(vec![format!("{what} {id}: {e}")])))
        .collect()
}

/// Recall@k both ways. `truth` is a `caption_id,image_id` CSV.
pub fn eval_recall(images: &Path, texts: &Path, truth: &Path, ks: &[usize]) -> Result<crate::eval::RecallReport, PipelineError> {
    let f = File::open(truth).map_err(io_err(truth))?;
    let gt = crate::eval::RetrievalGroundTruth::from_csv(f).map_err(|e| PipelineError::Validation(vec![format!("{}: {e}", truth.display())]))?;
    let img = vectors_for(&load_archive(images)?, &gt.image_ids, "image")?;
    let txt = vectors_for(&load_archive(texts)?, &gt.caption_ids, "caption")?;
    let m = crate::eval::similarity_matrix(&img, &txt).map_err(|e| PipelineError::Validation(vec![e.to_string()]))?;
    crate::eval::recall_report(&m, &gt, ks).map_err(|e| stage_err("eval")(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZscReport {
    pub images: usize,
    pub classes: usize,
    pub top1: f64,
}

/// Zero-shot top-1 accuracy. `labels` is an `image_id,class` CSV.
pub fn eval_zsc(
    images: &Path,
    labels: &Path,
    prompts: &Path,
    provider: &dyn EmbeddingProvider,
) -> Result<ZscReport, PipelineError> {
    let pairs = crate::eval::RetrievalGroundTruth::load_pairs(labels)
        .map_err(|e| PipelineError::Validation(vec![format!("{}: {e}", labels.display())]))?;
    let text = std::fs::read_to_string(prompts).map_err(io_err(prompts))?;
    let set = crate::eval::ClassPromptSet::from_toml(&text).map_err(|e| PipelineError::Validation(vec![format!("{}: {e}", prompts.display())]))?;
    let archive = load_archive(images)?;
    let ids: Vec<String> = pairs.iter().map(|(i, _)| i.clone()).collect();
    let classes: Vec<String> = pairs.into_iter().map(|(_, c)| c).collect();
    let vecs = vectors_for(&archive, &ids, "image")?;
    let top1 = crate::eval::zero_shot_top1(&vecs, &classes, &set, provider, archive.model_id())
        .map_err(|e| stage_err("eval")(e.to_string()))?;
    Ok(ZscReport { images: ids.len(), classes: set.classes.len(), top1 })
}
