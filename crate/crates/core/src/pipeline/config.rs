//! Run configuration, its TOML form and the per-stage cache subhashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::answer::DecodeParams;
use crate::eval::{Dataset, Split, Stage};
use crate::hashing::canonical_hash;
use crate::prompt::{PromptContent, PromptFormat};
use crate::qa::DEFAULT_QA_CAP;
use crate::relevance::{RectifyMode, SamplingStrategy, DEFAULT_TOP_K_PATCHES};
use crate::rerank::DEFAULT_RERANK_KEEP;
use crate::summarize::{AOKVQA_SUMMARY_LENGTH, MIN_TARGET_LENGTH, OKVQA_SUMMARY_LENGTH};

/// Region captions requested per image, one per sampled patch by default.
pub const OKVQA_NUM_CAPTIONS: usize = 20;
pub const AOKVQA_NUM_CAPTIONS: usize = 5;
pub const DEFAULT_RETRIES: usize = 2;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Dataset files and the image directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// OK-VQA question file; unused for A-OKVQA.
    pub questions: Option<PathBuf>,
    /// OK-VQA annotation file or the A-OKVQA split file.
    pub annotations: Option<PathBuf>,
    /// Directory holding the COCO images, handed to backends as paths.
    pub image_dir: Option<PathBuf>,
}

/// Backend specs: `stub`, `rule-based` (tagger and QA answerer) or
/// `exec:<command>` for an external process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendIds {
    pub captioner: String,
    pub reranker: String,
    pub summarizer: String,
    pub answerer: String,
    pub qa_answerer: String,
    pub tagger: String,
}

impl Default for BackendIds {
    fn default() -> Self {
        Self {
            captioner: "stub".into(),
            reranker: "stub".into(),
            summarizer: "stub".into(),
            answerer: "stub".into(),
            qa_answerer: "rule-based".into(),
            tagger: "rule-based".into(),
        }
    }
}

/// Replacement asset files; bundled defaults are used when unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssetPaths {
    pub templates: Option<PathBuf>,
    pub pos_lexicon: Option<PathBuf>,
    pub adj_types: Option<PathBuf>,
    pub prompt: Option<PathBuf>,
    /// Scene phrases for the stub captioner.
    pub scenes: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Dataset,
    /// Defaults to the split evaluated for the dataset.
    pub split: Option<Split>,
    pub paths: DataPaths,
    pub backends: BackendIds,
    pub assets: AssetPaths,
    /// Region captions per image; one whole-image caption is always added.
    /// Defaults to the dataset's caption count.
    pub num_captions: Option<usize>,
    pub top_k_patches: usize,
    pub patch_sampling: SamplingStrategy,
    pub rectify: RectifyMode,
    pub rerank_keep: usize,
    /// Defaults to the dataset's summary length.
    pub summary_length: Option<usize>,
    pub qa_cap: usize,
    pub format: PromptFormat,
    pub content: PromptContent,
    pub decode: DecodeParams,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub max_items: Option<usize>,
    pub workers: usize,
    pub retries: usize,
    pub strict: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::default(),
            split: None,
            paths: DataPaths::default(),
            backends: BackendIds::default(),
            assets: AssetPaths::default(),
            num_captions: None,
            top_k_patches: DEFAULT_TOP_K_PATCHES,
            patch_sampling: SamplingStrategy::default(),
            rectify: RectifyMode::default(),
            rerank_keep: DEFAULT_RERANK_KEEP,
            summary_length: None,
            qa_cap: DEFAULT_QA_CAP,
            format: PromptFormat::default(),
            content: PromptContent::default(),
            decode: DecodeParams::default(),
            seed: 0,
            cache_dir: None,
            max_items: None,
            workers: 1,
            retries: DEFAULT_RETRIES,
            strict: false,
        }
    }
}

/// Fields that never change results.
const OPERATIONAL_FIELDS: [&str; 5] = ["cache_dir", "workers", "retries", "strict", "max_items"];

/// Digests of the asset files a run uses, mixed into stage subhashes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AssetDigests {
    pub templates: String,
    pub pos_lexicon: String,
    pub adj_types: String,
    pub prompt: String,
    pub scenes: String,
}

/// Cache subhash of every stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageHashes {
    pub relevance: String,
    pub captions: String,
    pub rerank: String,
    pub summary: String,
    pub qa: String,
    /// Prefix of the answer key; the prompt hash completes it per item.
    pub answer: String,
}

impl StageHashes {
    pub fn get(&self, stage: Stage) -> &str {
        match stage {
            Stage::Relevance => &self.relevance,
            Stage::Captions => &self.captions,
            Stage::Rerank => &self.rerank,
            Stage::Summary => &self.summary,
            Stage::Qa => &self.qa,
            Stage::Prompt | Stage::Answer => &self.answer,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        let a = &mut self.assets;
        for slot in [
            &mut p.questions,
            &mut p.annotations,
            &mut p.image_dir,
            &mut a.templates,
            &mut a.pos_lexicon,
            &mut a.adj_types,
            &mut a.prompt,
            &mut a.scenes,
            &mut self.cache_dir,
        ] {
            if let Some(path) = slot.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("num_captions", self.num_captions()),
            ("top_k_patches", self.top_k_patches),
            ("rerank_keep", self.rerank_keep),
            ("qa_cap", self.qa_cap),
            ("workers", self.workers),
            ("decode.max_new_tokens", self.decode.max_new_tokens),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be at least 1")));
            }
        }
        if self.max_items == Some(0) {
            return Err(ConfigError::Invalid("max_items must be at least 1".into()));
        }
        if self.summary_length() < MIN_TARGET_LENGTH {
            return Err(ConfigError::Invalid(format!(
                "summary_length must be at least {MIN_TARGET_LENGTH}"
            )));
        }
        if self.decode.temperature != 0.0 {
            return Err(ConfigError::Invalid("only greedy decoding (temperature 0) is supported".into()));
        }
        for (role, id) in self.backend_roles() {
            if id.trim().is_empty() {
                return Err(ConfigError::Invalid(format!("backend `{role}` is empty")));
            }
        }
        Ok(())
    }

    pub fn backend_roles(&self) -> [(&'static str, &str); 6] {
        let b = &self.backends;
        [
            ("captioner", b.captioner.as_str()),
            ("reranker", b.reranker.as_str()),
            ("summarizer", b.summarizer.as_str()),
            ("answerer", b.answerer.as_str()),
            ("qa_answerer", b.qa_answerer.as_str()),
            ("tagger", b.tagger.as_str()),
        ]
    }

    pub fn split(&self) -> Split {
        self.split.unwrap_or_else(|| self.dataset.default_split())
    }

    pub fn num_captions(&self) -> usize {
        self.num_captions.unwrap_or(match self.dataset {
            Dataset::OkVqa => OKVQA_NUM_CAPTIONS,
            Dataset::AOkVqa => AOKVQA_NUM_CAPTIONS,
        })
    }

    pub fn summary_length(&self) -> usize {
        self.summary_length.unwrap_or(match self.dataset {
            Dataset::OkVqa => OKVQA_SUMMARY_LENGTH,
            Dataset::AOkVqa => AOKVQA_SUMMARY_LENGTH,
        })
    }

    /// Short digest of every result-affecting field.
    pub fn config_id(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut value {
            for field in OPERATIONAL_FIELDS {
                map.remove(field);
            }
            map.insert("split".into(), json!(self.split()));
            map.insert("num_captions".into(), json!(self.num_captions()));
            map.insert("summary_length".into(), json!(self.summary_length()));
        }
        canonical_hash(&value)[..16].to_string()
    }

    /// Each stage hashes only the fields that reach it, so e.g. changing the
    /// prompt format leaves caption and rerank entries valid.
    pub fn stage_hashes(&self, assets: &AssetDigests) -> StageHashes {
        let relevance = json!({
            "dataset": self.dataset,
            "captioner": self.backends.captioner,
            "scenes": assets.scenes,
            "rectify": self.rectify,
        });
        let captions = json!({
            "relevance": relevance,
            "top_k_patches": self.top_k_patches,
            "patch_sampling": self.patch_sampling,
            "num_captions": self.num_captions(),
            "seed": self.seed,
        });
        let rerank = json!({ "captions": captions, "reranker": self.backends.reranker });
        // Summary and QA see the kept captions: reranked top-k or the first k.
        let kept = json!({
            "captions": captions,
            "reranker": self.content.reranked().then_some(&self.backends.reranker),
            "rerank_keep": self.rerank_keep,
        });
        let summary = json!({
            "kept": kept,
            "summarizer": self.backends.summarizer,
            "summary_length": self.summary_length(),
            "prompt_assets": assets.prompt,
        });
        let qa = json!({
            "kept": kept,
            "tagger": self.backends.tagger,
            "qa_answerer": self.backends.qa_answerer,
            "qa_cap": self.qa_cap,
            "templates": assets.templates,
            "pos_lexicon": assets.pos_lexicon,
            "adj_types": assets.adj_types,
        });
        let answer = json!({ "answerer": self.backends.answerer, "decode": self.decode });
        StageHashes {
            relevance: canonical_hash(&relevance),
            captions: canonical_hash(&captions),
            rerank: canonical_hash(&rerank),
            summary: canonical_hash(&summary),
            qa: canonical_hash(&qa),
            answer: canonical_hash(&answer),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.top_k_patches, 20);
        assert_eq!(c.rerank_keep, 5);
        assert_eq!(c.format, PromptFormat::default());
        assert_eq!(c.summary_length(), 140);
        assert_eq!(c.num_captions(), 20);
        let a = PipelineConfig {
            dataset: Dataset::AOkVqa,
            ..c.clone()
        };
        assert_eq!(a.summary_length(), 100);
        assert_eq!(a.num_captions(), 5);
        let explicit = PipelineConfig {
            num_captions: Some(20),
            ..a.clone()
        };
        assert_ne!(explicit.config_id(), a.config_id());
        let resolved = PipelineConfig {
            num_captions: Some(20),
            ..c.clone()
        };
        assert_eq!(resolved.config_id(), c.config_id());
        assert_eq!(a.split(), Split::Val);
    }

    #[test]
    fn toml_round_trip_and_reordering() {
        let a = PipelineConfig::from_toml("seed = 3\ndataset = \"aokvqa\"\n[decode]\nmax_new_tokens = 5\ntemperature = 0.0\n").unwrap();
        let b = PipelineConfig::from_toml("dataset = \"aokvqa\"\nseed = 3\n[decode]\ntemperature = 0.0\nmax_new_tokens = 5\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.config_id(), b.config_id());
        assert_eq!(PipelineConfig::from_toml(&a.to_toml()).unwrap(), a);
    }

    #[test]
    fn invalid_configs() {
        for text in [
            "num_captions = 0",
            "rerank_keep = 0",
            "summary_length = 4",
            "format = \"X+Y\"",
            "unknown_key = 1",
            "[decode]\ntemperature = 0.5",
        ] {
            assert!(PipelineConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn format_change_keeps_upstream_hashes() {
        let base = PipelineConfig::default();
        let other = PipelineConfig {
            format: PromptFormat::ALL[0],
            workers: 8,
            ..base.clone()
        };
        let d = AssetDigests::default();
        let (h1, h2) = (base.stage_hashes(&d), other.stage_hashes(&d));
        assert_eq!(h1, h2);
        let seeded = PipelineConfig { seed: 1, ..base.clone() };
        let h3 = seeded.stage_hashes(&d);
        assert_eq!(h1.relevance, h3.relevance);
        assert_ne!(h1.captions, h3.captions);
        assert_ne!(base.config_id(), seeded.config_id());
        let cached = PipelineConfig {
            cache_dir: Some("x".into()),
            ..base.clone()
        };
        assert_eq!(base.config_id(), cached.config_id());
    }
}
