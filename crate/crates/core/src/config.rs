//! Pipeline configuration: TOML file, `RSCURATE_<SECTION>_<KEY>` overrides, full validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::caption::CaptionPolicy;
use crate::dedup::DedupPolicy;
use crate::fetch::FetchPolicy;
use crate::score::FilterPolicy;
use crate::shard::ShardSpec;

pub const ENV_PREFIX: &str = "RSCURATE_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

impl ConfigError {
    pub fn problems(&self) -> &[String] {
        match self {
            ConfigError::Invalid(p) => p,
            ConfigError::Io { .. } => &[],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Input manifest for the first stage.
    pub input: Option<PathBuf>,
    /// Directory receiving stage outputs.
    pub work_dir: Option<PathBuf>,
    /// Content-addressed image store; defaults to `<work_dir>/blobs`.
    pub blob_store: Option<PathBuf>,
    pub keywords: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub meta_templates: Option<PathBuf>,
    pub gazetteer: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    /// Precomputed image embedding archive used instead of a provider.
    pub image_embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Test,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: ProviderKind,
    pub model_id: String,
    pub detector_model: String,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Test,
            model_id: "clip-vit-h-14".into(),
            detector_model: "rs-detector".into(),
            dim: 64,
            endpoint: None,
            timeout_ms: 30_000,
            retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeywordsConfig {
    /// Sources that skip the keyword and score filters.
    pub exempt_sources: Vec<String>,
}

impl Default for KeywordsConfig {
    fn default() -> Self {
        Self { exempt_sources: vec!["fmow".into(), "bigearthnet".into(), "millionaid".into()] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub keywords: KeywordsConfig,
    pub fetch: FetchPolicy,
    pub embedding: EmbeddingConfig,
    pub dedup: DedupPolicy,
    pub filter: FilterPolicy,
    pub caption: CaptionPolicy,
    pub shard: ShardSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            keywords: KeywordsConfig::default(),
            fetch: FetchPolicy::default(),
            embedding: EmbeddingConfig::default(),
            dedup: DedupPolicy::default(),
            filter: FilterPolicy::default(),
            caption: CaptionPolicy::default(),
            shard: ShardSpec::default(),
        }
    }
}

const SECTIONS: &[&str] = &["paths", "keywords", "fetch", "embedding", "dedup", "filter", "caption", "shard"];

/// Interpret an env value as a TOML scalar, falling back to a string.
fn env_value(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    if raw.starts_with('[') {
        if let Ok(t) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            if let Some(v) = t.get("v") {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

impl PipelineConfig {
    /// Parse TOML text, apply overrides, validate.
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut problems = Vec::new();
        let mut table: toml::Table = match toml::from_str(text) {
            Ok(t) => t,
            Err(e) => return Err(ConfigError::Invalid(vec![format!("syntax: {e}")])),
        };
        let env: BTreeMap<String, String> = env.into_iter().collect();
        for (name, raw) in &env {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let rest = rest.to_ascii_lowercase();
            if rest == "seed" {
                table.insert("seed".into(), env_value(raw));
                continue;
            }
            let Some(section) = SECTIONS.iter().find(|s| rest.starts_with(&format!("{s}_"))) else {
                continue;
            };
            let key = &rest[section.len() + 1..];
            let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            match entry.as_table_mut() {
                Some(t) => {
                    t.insert(key.to_string(), env_value(raw));
                }
                None => problems.push(format!("{section} must be a table")),
            }
        }
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        let config: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(vec![e.message().to_string()]))?;
        let problems = config.validate();
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut config = Self::from_toml_with_env(&text, std::env::vars())?;
        config.resolve_relative(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Defaults plus environment overrides, as used when no file is given.
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_toml_with_env("", std::env::vars())
    }

    /// Make relative paths relative to the config file's directory.
    pub fn resolve_relative(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.input,
            &mut p.work_dir,
            &mut p.blob_store,
            &mut p.keywords,
            &mut p.templates,
            &mut p.meta_templates,
            &mut p.gazetteer,
            &mut p.candidates,
            &mut p.image_embeddings,
        ] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    /// Every problem, each prefixed with its field path.
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut section = |name: &str, issues: Vec<String>| p.extend(issues.into_iter().map(|i| format!("{name}.{i}")));
        section("fetch", self.fetch.validate());
        section("dedup", self.dedup.validate());
        section("filter", self.filter.validate());
        section("caption", self.caption.validate());
        section("shard", self.shard.validate());
        let mut emb = Vec::new();
        if self.embedding.dim == 0 {
            emb.push("dim must be at least 1".to_string());
        }
        if self.embedding.model_id.is_empty() {
            emb.push("model_id must not be empty".to_string());
        }
        if self.embedding.provider == ProviderKind::Remote && self.embedding.endpoint.is_none() {
            emb.push("endpoint is required for the remote provider".to_string());
        }
        section("embedding", emb);
        let bad: Vec<String> = self
            .keywords
            .exempt_sources
            .iter()
            .filter(|s| s.parse::<crate::model::Source>().is_err())
            .map(|s| format!("exempt_sources: unknown source '{s}'"))
            .collect();
        section("keywords", bad);
        p
    }

    /// Files named in `paths` that stages will read must exist.
    pub fn check_inputs(&self, needed: &[(&str, Option<&Path>)]) -> Vec<String> {
        needed
            .iter()
            .filter_map(|(name, path)| match path {
                None => Some(format!("paths.{name} is required")),
                Some(p) if !p.exists() => Some(format!("paths.{name}: {} does not exist", p.display())),
                _ => None,
            })
            .collect()
    }

    pub fn exempt(&self) -> Vec<crate::model::Source> {
        self.keywords.exempt_sources.iter().filter_map(|s| s.parse().ok()).collect()
    }
}
