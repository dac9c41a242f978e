//! Caption summarization through a frozen language model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{with_retries, LanguageModel};
use crate::caption::Caption;
use crate::prompt::PromptAssets;
use crate::tokenize::truncate_to_tokens;

/// Extra tokens tolerated beyond the requested summary length.
pub const LENGTH_SLACK: usize = 8;
/// Smallest accepted target length.
pub const MIN_TARGET_LENGTH: usize = 16;
/// Default target length for A-OKVQA.
pub const AOKVQA_SUMMARY_LENGTH: usize = 100;
/// Default target length for OK-VQA.
pub const OKVQA_SUMMARY_LENGTH: usize = 140;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SummarizeError {
    #[error("nothing to summarize")]
    NoCaptions,
    #[error("target length {0} is below the minimum of {MIN_TARGET_LENGTH}")]
    TargetTooShort(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub text: String,
    pub target_length: usize,
    pub backend_id: String,
    /// `gen_index` of each summarized caption, in input order.
    pub source_caption_indices: Vec<usize>,
    /// The backend failed and `text` is the top-2 caption fallback.
    #[serde(default)]
    pub degraded: bool,
}

#[derive(Debug, Clone)]
pub struct Summarizer {
    /// Prompt with `{L}` (length) and `{captions}` placeholders.
    pub template: String,
    pub slack: usize,
    pub retries: usize,
}

impl Default for Summarizer {
    fn default() -> Self {
        Self {
            template: PromptAssets::default().summary_template,
            slack: LENGTH_SLACK,
            retries: 0,
        }
    }
}

/// Joins caption texts into one paragraph, one sentence per caption.
pub fn join_captions(captions: &[Caption]) -> String {
    captions
        .iter()
        .map(|c| c.text.trim().trim_end_matches(['.', '!', '?']).trim_end())
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(". ")
}

impl Summarizer {
    pub fn render_prompt(&self, captions: &[Caption], target_length: usize) -> String {
        self.template
            .replace("{L}", &target_length.to_string())
            .replace("{captions}", &join_captions(captions))
    }

    /// `captions` are expected in rerank order; the fallback uses the first two.
    pub fn summarize(
        &self,
        captions: &[Caption],
        target_length: usize,
        backend: &dyn LanguageModel,
        seed: u64,
    ) -> Result<Summary, SummarizeError> {
        if captions.is_empty() {
            return Err(SummarizeError::NoCaptions);
        }
        if target_length < MIN_TARGET_LENGTH {
            return Err(SummarizeError::TargetTooShort(target_length));
        }
        let cap = target_length + self.slack;
        let prompt = self.render_prompt(captions, target_length);
        let generated = with_retries(self.retries, || backend.complete(&prompt, cap, seed));
        let text = match generated {
            Ok(out) => truncate_to_tokens(&out, cap),
            Err(e) => {
                log::warn!("summarizer fell back to top captions: {e}");
                String::new()
            }
        };
        let (text, degraded) = if text.is_empty() {
            (truncate_to_tokens(&fallback_summary(captions), cap), true)
        } else {
            (text, false)
        };
        Ok(Summary {
            text,
            target_length,
            backend_id: backend.id().to_string(),
            source_caption_indices: captions.iter().map(|c| c.gen_index).collect(),
            degraded,
        })
    }
}

/// The two best captions joined by ". ".
pub fn fallback_summary(captions: &[Caption]) -> String {
    captions
        .iter()
        .take(2)
        .map(|c| c.text.as_str())
        .collect::<Vec<_>>()
        .join(". ")
}

pub fn summarize(
    captions: &[Caption],
    target_length: usize,
    backend: &dyn LanguageModel,
    seed: u64,
) -> Result<Summary, SummarizeError> {
    Summarizer::default().summarize(captions, target_length, backend, seed)
}
