//! Region-focused captioning through a frozen image-captioning backend.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::relevance::{AttentionTensor, PatchSelection};

/// Opaque handle to an image. Backends decide how to resolve it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            path: None,
        }
    }
}

/// One generated description of an image region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    /// Patches that conditioned this caption; empty for whole-image captions.
    pub patch_indices: Vec<usize>,
    pub backend_id: String,
    pub gen_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionerCapabilities {
    pub max_captions_per_call: usize,
    pub supports_patch_masking: bool,
    pub supports_attention_export: bool,
    /// `Some(1)` for backends that cannot serve concurrent calls.
    pub max_concurrency: Option<usize>,
}

pub trait CaptionerBackend: Send + Sync {
    fn id(&self) -> &str;

    fn capabilities(&self) -> CaptionerCapabilities;

    /// Generates at most `n` captions for `image`, conditioned on
    /// `patch_indices` (empty slice means the whole image).
    fn generate(
        &self,
        image: &ImageRef,
        patch_indices: &[usize],
        n: usize,
        seed: u64,
    ) -> Result<Vec<String>, BackendError>;

    /// Cross-attention maps and gradients of the image-text matching score
    /// for `question`.
    fn export_attention(
        &self,
        _image: &ImageRef,
        _question: &str,
    ) -> Result<AttentionTensor, BackendError> {
        Err(BackendError::Unsupported {
            backend_id: self.id().to_string(),
            capability: "attention export",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaptionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("backend `{backend_id}` produced no usable captions")]
    NoCaptions { backend_id: String },
    #[error("caption count must be at least 1")]
    ZeroCount,
}

/// Requests `n` captions conditioned on `selection`, split into calls of at
/// most `max_captions_per_call`. Empty generations are dropped.
pub fn generate_captions(
    image: &ImageRef,
    selection: &PatchSelection,
    n: usize,
    backend: &dyn CaptionerBackend,
    seed: u64,
) -> Result<Vec<Caption>, CaptionError> {
    if n == 0 {
        return Err(CaptionError::ZeroCount);
    }
    let per_call = backend.capabilities().max_captions_per_call.max(1);
    let mut raw = Vec::with_capacity(n);
    let mut call = 0u64;
    while raw.len() < n {
        let want = per_call.min(n - raw.len());
        let mut got = backend.generate(image, &selection.indices, want, seed.wrapping_add(call))?;
        got.truncate(want);
        let exhausted = got.len() < want;
        raw.extend(got);
        if exhausted {
            break;
        }
        call += 1;
    }

    let captions: Vec<Caption> = raw
        .into_iter()
        .enumerate()
        .filter_map(|(gen_index, text)| {
            let text = text.trim();
            (!text.is_empty()).then(|| Caption {
                text: text.to_string(),
                patch_indices: selection.indices.clone(),
                backend_id: backend.id().to_string(),
                gen_index,
            })
        })
        .collect();
    if captions.is_empty() {
        return Err(CaptionError::NoCaptions {
            backend_id: backend.id().to_string(),
        });
    }
    Ok(captions)
}

fn dedup_key(text: &str) -> String {
    let collapsed = text
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    collapsed
        .trim_end_matches(|c: char| matches!(c, '.' | '!' | '?' | ',' | ';' | ':') || c.is_whitespace())
        .to_string()
}

/// Drops captions that repeat an earlier one up to case, whitespace and
/// trailing punctuation. Order is preserved; the first occurrence wins.
pub fn dedup_captions(captions: Vec<Caption>) -> Vec<Caption> {
    let mut seen = HashSet::new();
    captions
        .into_iter()
        .filter(|c| seen.insert(dedup_key(&c.text)))
        .collect()
}
