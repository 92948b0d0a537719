//! Shared record types, dispositions, and the per-stage conservation ledger.
//!
//! Every stage reads and writes line-delimited manifests of [`ManifestLine`]s:
//! a [`SourceRecord`] plus the disposition it received at that stage. The
//! [`PipelineLedger`] counts those dispositions per (source, stage) so that a
//! run can be audited without re-reading the manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::meta::MetaRecord;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("unknown source dataset '{0}'")]
    UnknownSource(String),
    #[error("unknown stage '{0}'")]
    UnknownStage(String),
    #[error("disposition {disposition} is not valid at stage {stage}")]
    InvalidDisposition { stage: Stage, disposition: Disposition },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

/// Source dataset a record was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Laion2b,
    Coyo700m,
    Laioncoco,
    Laion400m,
    Wit,
    Yfcc15m,
    Cc12m,
    Redcaps,
    Cc3m,
    Sbu,
    Vg,
    Fmow,
    Bigearthnet,
    Millionaid,
}

impl Source {
    pub const ALL: [Source; 14] = [
        Source::Laion2b,
        Source::Coyo700m,
        Source::Laioncoco,
        Source::Laion400m,
        Source::Wit,
        Source::Yfcc15m,
        Source::Cc12m,
        Source::Redcaps,
        Source::Cc3m,
        Source::Sbu,
        Source::Vg,
        Source::Fmow,
        Source::Bigearthnet,
        Source::Millionaid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Laion2b => "laion2b",
            Source::Coyo700m => "coyo700m",
            Source::Laioncoco => "laioncoco",
            Source::Laion400m => "laion400m",
            Source::Wit => "wit",
            Source::Yfcc15m => "yfcc15m",
            Source::Cc12m => "cc12m",
            Source::Redcaps => "redcaps",
            Source::Cc3m => "cc3m",
            Source::Sbu => "sbu",
            Source::Vg => "vg",
            Source::Fmow => "fmow",
            Source::Bigearthnet => "bigearthnet",
            Source::Millionaid => "millionaid",
        }
    }

    /// Label-only remote-sensing archives that are captioned rather than crawled.
    pub fn is_rs3(self) -> bool {
        matches!(self, Source::Fmow | Source::Bigearthnet | Source::Millionaid)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Source::ALL
            .iter()
            .copied()
            .find(|src| src.as_str() == s)
            .ok_or_else(|| ModelError::UnknownSource(s.to_string()))
    }
}

/// One image-text pair flowing through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub record_id: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<MetaRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl SourceRecord {
    pub fn new(record_id: impl Into<String>, source: Source, caption: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            source,
            url: None,
            caption: caption.into(),
            meta: None,
            image_ref: None,
        }
    }

    pub fn with_url(mut self, url: impl Into<String>) -> Self {
        self.url = Some(url.into());
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.record_id.is_empty() {
            return Err(ModelError::InvalidRecord("empty record_id".into()));
        }
        if let Some(meta) = &self.meta {
            meta.validate()
                .map_err(|e| ModelError::InvalidRecord(format!("{}: {e}", self.record_id)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    #[default]
    Kept,
    RemovedByKeyword,
    RemovedInvalidImage,
    RemovedDuplicateUrl,
    RemovedDuplicateNear,
    RemovedByScoreFilter,
    FetchFailed,
}

impl Disposition {
    pub fn as_str(self) -> &'static str {
        match self {
            Disposition::Kept => "kept",
            Disposition::RemovedByKeyword => "removed_by_keyword",
            Disposition::RemovedInvalidImage => "removed_invalid_image",
            Disposition::RemovedDuplicateUrl => "removed_duplicate_url",
            Disposition::RemovedDuplicateNear => "removed_duplicate_near",
            Disposition::RemovedByScoreFilter => "removed_by_score_filter",
            Disposition::FetchFailed => "fetch_failed",
        }
    }
}

impl fmt::Display for Disposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stages that can remove records, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Keywords,
    Fetch,
    Dedup,
    ScoreFilter,
}

impl Stage {
    pub const ORDER: [Stage; 4] = [Stage::Keywords, Stage::Fetch, Stage::Dedup, Stage::ScoreFilter];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Keywords => "keywords",
            Stage::Fetch => "fetch",
            Stage::Dedup => "dedup",
            Stage::ScoreFilter => "score_filter",
        }
    }

    pub fn allows(self, disposition: Disposition) -> bool {
        use Disposition::*;
        match self {
            Stage::Keywords => matches!(disposition, Kept | RemovedByKeyword),
            Stage::Fetch => matches!(disposition, Kept | FetchFailed | RemovedInvalidImage),
            Stage::Dedup => {
                matches!(disposition, Kept | RemovedDuplicateUrl | RemovedDuplicateNear)
            }
            Stage::ScoreFilter => matches!(disposition, Kept | RemovedByScoreFilter),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ORDER
            .iter()
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| ModelError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    pub attempted: u64,
    pub kept: u64,
    #[serde(default)]
    pub removed_by_keyword: u64,
    #[serde(default)]
    pub removed_invalid_image: u64,
    #[serde(default)]
    pub removed_duplicate_url: u64,
    #[serde(default)]
    pub removed_duplicate_near: u64,
    #[serde(default)]
    pub removed_by_score_filter: u64,
    #[serde(default)]
    pub fetch_failed: u64,
}

impl StageCounters {
    fn slot(&mut self, disposition: Disposition) -> &mut u64 {
        match disposition {
            Disposition::Kept => &mut self.kept,
            Disposition::RemovedByKeyword => &mut self.removed_by_keyword,
            Disposition::RemovedInvalidImage => &mut self.removed_invalid_image,
            Disposition::RemovedDuplicateUrl => &mut self.removed_duplicate_url,
            Disposition::RemovedDuplicateNear => &mut self.removed_duplicate_near,
            Disposition::RemovedByScoreFilter => &mut self.removed_by_score_filter,
            Disposition::FetchFailed => &mut self.fetch_failed,
        }
    }

    pub fn get(&self, disposition: Disposition) -> u64 {
        let mut copy = *self;
        *copy.slot(disposition)
    }

    pub fn removed(&self) -> u64 {
        self.removed_by_keyword
            + self.removed_invalid_image
            + self.removed_duplicate_url
            + self.removed_duplicate_near
            + self.removed_by_score_filter
            + self.fetch_failed
    }

    /// attempted − kept − Σ removed, as a signed value.
    pub fn residual(&self) -> i128 {
        self.attempted as i128 - self.kept as i128 - self.removed() as i128
    }

    fn add(&mut self, other: &StageCounters) {
        self.attempted += other.attempted;
        self.kept += other.kept;
        self.removed_by_keyword += other.removed_by_keyword;
        self.removed_invalid_image += other.removed_invalid_image;
        self.removed_duplicate_url += other.removed_duplicate_url;
        self.removed_duplicate_near += other.removed_duplicate_near;
        self.removed_by_score_filter += other.removed_by_score_filter;
        self.fetch_failed += other.fetch_failed;
    }
}

/// A single conservation failure found by [`PipelineLedger::verify_conservation`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub source: Source,
    pub stage: Stage,
    pub kind: ViolationKind,
    pub residual: i128,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// attempted ≠ kept + Σ removed within one stage.
    Stage,
    /// Records leaving one stage kept do not all enter the next recorded stage.
    Chain,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ViolationKind::Stage => write!(
                f,
                "{}/{}: attempted - kept - removed = {}",
                self.source, self.stage, self.residual
            ),
            ViolationKind::Chain => write!(
                f,
                "{}/{}: kept upstream - attempted here = {}",
                self.source, self.stage, self.residual
            ),
        }
    }
}

/// Per-source end-to-end view: what entered the first recorded stage and how it left.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SourceSummary {
    pub entered: u64,
    pub kept: u64,
    pub removed: BTreeMap<Disposition, u64>,
}

/// Per-(source, stage) disposition counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineLedger {
    pub sources: BTreeMap<Source, BTreeMap<Stage, StageCounters>>,
}

impl PipelineLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        source: Source,
        stage: Stage,
        disposition: Disposition,
    ) -> Result<(), ModelError> {
        if !stage.allows(disposition) {
            return Err(ModelError::InvalidDisposition { stage, disposition });
        }
        let counters = self.sources.entry(source).or_default().entry(stage).or_default();
        counters.attempted += 1;
        *counters.slot(disposition) += 1;
        Ok(())
    }

    /// String-keyed form of [`record`](Self::record) for manifests and the CLI.
    pub fn record_named(
        &mut self,
        source: &str,
        stage: &str,
        disposition: Disposition,
    ) -> Result<(), ModelError> {
        self.record(source.parse()?, stage.parse()?, disposition)
    }

    pub fn counters(&self, source: Source, stage: Stage) -> StageCounters {
        self.sources
            .get(&source)
            .and_then(|stages| stages.get(&stage))
            .copied()
            .unwrap_or_default()
    }

    pub fn counters_mut(&mut self, source: Source, stage: Stage) -> &mut StageCounters {
        self.sources.entry(source).or_default().entry(stage).or_default()
    }

    /// Commutative addition of another ledger's counters.
    pub fn merge(&mut self, other: &PipelineLedger) {
        for (source, stages) in &other.sources {
            for (stage, counters) in stages {
                self.counters_mut(*source, *stage).add(counters);
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn verify_conservation(&self) -> Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        for (source, stages) in &self.sources {
            let mut upstream_kept: Option<u64> = None;
            for (stage, counters) in stages {
                let residual = counters.residual();
                if residual != 0 {
                    violations.push(Violation {
                        source: *source,
                        stage: *stage,
                        kind: ViolationKind::Stage,
                        residual,
                    });
                }
                if let Some(kept) = upstream_kept {
                    let gap = kept as i128 - counters.attempted as i128;
                    if gap != 0 {
                        violations.push(Violation {
                            source: *source,
                            stage: *stage,
                            kind: ViolationKind::Chain,
                            residual: gap,
                        });
                    }
                }
                upstream_kept = Some(counters.kept);
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    pub fn source_summary(&self, source: Source) -> SourceSummary {
        let mut summary = SourceSummary::default();
        let Some(stages) = self.sources.get(&source) else {
            return summary;
        };
        if let Some(first) = stages.values().next() {
            summary.entered = first.attempted;
        }
        if let Some(last) = stages.values().last() {
            summary.kept = last.kept;
        }
        for counters in stages.values() {
            for d in [
                Disposition::RemovedByKeyword,
                Disposition::RemovedInvalidImage,
                Disposition::RemovedDuplicateUrl,
                Disposition::RemovedDuplicateNear,
                Disposition::RemovedByScoreFilter,
                Disposition::FetchFailed,
            ] {
                let n = counters.get(d);
                if n > 0 {
                    *summary.removed.entry(d).or_default() += n;
                }
            }
        }
        summary
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// A record together with the disposition a stage assigned to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    #[serde(flatten)]
    pub record: SourceRecord,
    #[serde(default)]
    pub disposition: Disposition,
}

impl ManifestLine {
    pub fn kept(record: SourceRecord) -> Self {
        Self { record, disposition: Disposition::Kept }
    }
}

/// Output of one stage: every input record exactly once, plus the stage ledger.
#[derive(Debug, Clone, Default)]
pub struct StageOutput {
    pub lines: Vec<ManifestLine>,
    pub ledger: PipelineLedger,
    pub errors: Vec<LineError>,
}

impl StageOutput {
    pub fn kept(&self) -> impl Iterator<Item = &SourceRecord> {
        self.lines
            .iter()
            .filter(|l| l.disposition == Disposition::Kept)
            .map(|l| &l.record)
    }

    pub fn kept_records(&self) -> Vec<SourceRecord> {
        self.kept().cloned().collect()
    }

    pub fn count(&self, disposition: Disposition) -> usize {
        self.lines.iter().filter(|l| l.disposition == disposition).count()
    }

    pub(crate) fn push(
        &mut self,
        stage: Stage,
        record: SourceRecord,
        disposition: Disposition,
    ) {
        self.ledger
            .record(record.source, stage, disposition)
            .expect("stage emits only its own dispositions");
        self.lines.push(ManifestLine { record, disposition });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Parse a manifest, yielding one result per non-blank line.
pub fn read_manifest<R: BufRead>(reader: R) -> impl Iterator<Item = Result<ManifestLine, LineError>> {
    reader.lines().enumerate().filter_map(|(idx, line)| {
        let line_no = idx + 1;
        match line {
            Err(e) => Some(Err(LineError { line: line_no, message: e.to_string() })),
            Ok(text) if text.trim().is_empty() => None,
            Ok(text) => Some(
                serde_json::from_str::<ManifestLine>(&text)
                    .map_err(|e| e.to_string())
                    .and_then(|l| l.record.validate().map(|_| l).map_err(|e| e.to_string()))
                    .map_err(|message| LineError { line: line_no, message }),
            ),
        }
    })
}

pub fn write_manifest<'a, W: Write>(
    mut writer: W,
    lines: impl IntoIterator<Item = &'a ManifestLine>,
) -> std::io::Result<()> {
    for line in lines {
        serde_json::to_writer(&mut writer, line)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

/// Check that record ids are unique; returns the duplicated ids.
pub fn duplicate_ids<'a>(records: impl IntoIterator<Item = &'a SourceRecord>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut dups = std::collections::BTreeSet::new();
    for r in records {
        if !seen.insert(r.record_id.as_str()) {
            dups.insert(r.record_id.clone());
        }
    }
    dups.into_iter().collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub count: u64,
    pub total_words: u64,
    pub mean_words: f64,
    pub max_words: u64,
    /// (bucket lower bound, count); bucket of n words is the largest power of two ≤ n, 0 for empty captions.
    pub histogram: Vec<(u64, u64)>,
}

pub fn word_count(caption: &str) -> u64 {
    caption.split_whitespace().count() as u64
}

fn log_bucket(words: u64) -> u64 {
    if words == 0 {
        0
    } else {
        1u64 << (63 - words.leading_zeros())
    }
}

pub fn caption_stats<'a>(captions: impl IntoIterator<Item = &'a str>) -> CaptionStats {
    let mut count = 0u64;
    let mut total = 0u64;
    let mut max = 0u64;
    let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
    for caption in captions {
        let words = word_count(caption);
        count += 1;
        total += words;
        max = max.max(words);
        *hist.entry(log_bucket(words)).or_default() += 1;
    }
    CaptionStats {
        count,
        total_words: total,
        mean_words: if count == 0 { 0.0 } else { total as f64 / count as f64 },
        max_words: max,
        histogram: hist.into_iter().collect(),
    }
}
