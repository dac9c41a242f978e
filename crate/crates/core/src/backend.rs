//! Contracts shared by every frozen-model backend.
//!
//! Concrete model stacks (captioners, cross-encoders, language models) live
//! outside this crate. They plug in through the traits in
//! [`crate::caption`], [`crate::rerank`], [`crate::qa`] and the
//! [`LanguageModel`] trait below, which the summarizer and the answer engine
//! share.

use thiserror::Error;

/// Failure reported by a model backend.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend `{backend_id}` failed: {message}")]
    Failed {
        backend_id: String,
        message: String,
        retriable: bool,
    },
    #[error("backend `{backend_id}` does not support {capability}")]
    Unsupported {
        backend_id: String,
        capability: &'static str,
    },
}

impl BackendError {
    pub fn retriable(backend_id: impl Into<String>, message: impl Into<String>) -> Self {
        BackendError::Failed {
            backend_id: backend_id.into(),
            message: message.into(),
            retriable: true,
        }
    }

    pub fn fatal(backend_id: impl Into<String>, message: impl Into<String>) -> Self {
        BackendError::Failed {
            backend_id: backend_id.into(),
            message: message.into(),
            retriable: false,
        }
    }

    pub fn backend_id(&self) -> &str {
        match self {
            BackendError::Failed { backend_id, .. } | BackendError::Unsupported { backend_id, .. } => {
                backend_id
            }
        }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Failed { retriable: true, .. })
    }
}

/// Text-completion backend. Used for both caption summarization and answer
/// generation.
pub trait LanguageModel: Send + Sync {
    fn id(&self) -> &str;

    /// Maximum number of concurrent `complete` calls the backend tolerates.
    /// `None` means unbounded.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }

    fn complete(&self, prompt: &str, max_tokens: usize, seed: u64) -> Result<String, BackendError>;

    /// Batched completion with per-item semantics identical to [`complete`].
    ///
    /// [`complete`]: LanguageModel::complete
    fn complete_batch(
        &self,
        prompts: &[&str],
        max_tokens: usize,
        seed: u64,
    ) -> Vec<Result<String, BackendError>> {
        prompts
            .iter()
            .map(|p| self.complete(p, max_tokens, seed))
            .collect()
    }
}

/// Runs `op` and retries it up to `retries` extra times while it fails with a
/// retriable error.
pub fn with_retries<T>(
    retries: usize,
    mut op: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut attempt = 0;
    loop {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retriable() && attempt < retries => {
                log::warn!("retrying after backend error: {e}");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retries_stop_at_limit() {
        let mut calls = 0;
        let r: Result<(), _> = with_retries(2, || {
            calls += 1;
            Err(BackendError::retriable("x", "boom"))
        });
        assert!(r.is_err());
        assert_eq!(calls, 3);
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let mut calls = 0;
        let r: Result<(), _> = with_retries(5, || {
            calls += 1;
            Err(BackendError::fatal("x", "boom"))
        });
        assert!(r.is_err());
        assert_eq!(calls, 1);
    }
}
