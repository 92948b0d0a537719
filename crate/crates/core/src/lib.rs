//! Curation pipeline for remote-sensing image-text corpora.

pub mod caption;
pub mod config;
pub mod dedup;
pub mod embed;
pub mod eval;
pub mod fetch;
pub mod fixture;
pub mod geo;
pub mod keywords;
pub mod meta;
pub mod model;
pub mod pipeline;
pub mod review;
pub mod score;
pub mod shard;
pub mod store;

pub use model::{Disposition, ManifestLine, PipelineLedger, Source, SourceRecord, Stage, StageOutput};
