//! One-to-one caption reranking.
//!
//! Each (question, caption) pair is scored independently by a cross-encoder
//! and the highest-scoring captions are kept in score order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::caption::Caption;
use crate::relevance::rank_descending;

/// Captions kept after reranking unless configured otherwise.
pub const DEFAULT_RERANK_KEEP: usize = 5;

/// Cross-encoder relevance scorer.
pub trait RerankerBackend: Send + Sync {
    fn model_id(&self) -> &str;

    fn max_concurrency(&self) -> Option<usize> {
        None
    }

    /// Relevance of `caption` to `question`; finite and deterministic.
    fn score(&self, question: &str, caption: &str) -> Result<f64, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RerankError {
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("caption {0} has empty text")]
    EmptyCaption(usize),
    #[error("reranker `{backend_id}` returned non-finite score {score}")]
    NonFiniteScore { backend_id: String, score: f64 },
    #[error("keep count k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCaption {
    pub caption_index: usize,
    pub score: f64,
    pub backend_id: String,
}

pub fn score_pair(
    question: &str,
    caption: &Caption,
    caption_index: usize,
    backend: &dyn RerankerBackend,
) -> Result<ScoredCaption, RerankError> {
    if question.trim().is_empty() {
        return Err(RerankError::EmptyQuestion);
    }
    if caption.text.trim().is_empty() {
        return Err(RerankError::EmptyCaption(caption_index));
    }
    let score = backend.score(question, &caption.text)?;
    if !score.is_finite() {
        return Err(RerankError::NonFiniteScore {
            backend_id: backend.model_id().to_string(),
            score,
        });
    }
    Ok(ScoredCaption {
        caption_index,
        score,
        backend_id: backend.model_id().to_string(),
    })
}

/// Top-k captions, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSelection {
    /// Caption indices ordered by nonincreasing score.
    pub ordered: Vec<usize>,
    pub k: usize,
    /// Set when there was nothing to select from.
    #[serde(default)]
    pub empty_input: bool,
}

/// Arg-top-k by score; ties go to the lower caption index.
pub fn select_top_captions(scored: &[ScoredCaption], k: usize) -> Result<CaptionSelection, RerankError> {
    if k == 0 {
        return Err(RerankError::ZeroK);
    }
    if scored.is_empty() {
        log::warn!("caption rerank received no captions");
        return Ok(CaptionSelection {
            ordered: Vec::new(),
            k,
            empty_input: true,
        });
    }
    // Rank by (score desc, caption_index asc) independent of input order.
    let mut by_index: Vec<&ScoredCaption> = scored.iter().collect();
    by_index.sort_by_key(|s| s.caption_index);
    let scores: Vec<f64> = by_index.iter().map(|s| s.score).collect();
    let ordered = rank_descending(&scores)
        .into_iter()
        .take(k)
        .map(|i| by_index[i].caption_index)
        .collect();
    Ok(CaptionSelection {
        ordered,
        k,
        empty_input: false,
    })
}
