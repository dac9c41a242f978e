//! End-to-end orchestration: configuration, stage caching and execution.

pub mod cache;
pub mod config;

pub use cache::{decode_cache_line, CacheKey, CacheRecord, StageCache};
pub use config::{AssetDigests, ConfigError, PipelineConfig, StageHashes};
pub mod run;

pub use run::{load_items, rescore, Assets, Backends, ItemTrace, Pipeline, PipelineError, RunOutput};
