//! Deterministic in-process backends.
//!
//! They stand in for the frozen models in tests and dry runs: every output is
//! a pure function of the inputs (and seed), so whole pipeline runs are
//! reproducible without weights. [`Counted`] wraps any backend with a call
//! counter.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{BackendError, LanguageModel};
use crate::caption::{CaptionerBackend, CaptionerCapabilities, ImageRef};
use crate::hashing::derive_seed;
use crate::prompt::PromptLabels;
use crate::qa::{ContextAnswerer, PartOfSpeech, PosTagger};
use crate::relevance::{cross_attention_scores, AttentionTensor, FeatureMatrices};
use crate::rerank::RerankerBackend;
use crate::tokenize::truncate_to_tokens;

/// ViT-B/16 at 384px: a 24 x 24 patch grid.
pub const STUB_NUM_PATCHES: usize = 576;
const STUB_HEADS: usize = 4;
const STUB_DIM: usize = 8;

fn unit(seed: u64) -> f64 {
    (seed >> 11) as f64 / (1u64 << 53) as f64
}

/// Wraps a backend and counts calls into it.
#[derive(Debug, Default)]
pub struct Counted<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B> Counted<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn hit(&self) {
        self.calls.fetch_add(1, Ordering::SeqCst);
    }
}

impl<B: CaptionerBackend> CaptionerBackend for Counted<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn capabilities(&self) -> CaptionerCapabilities {
        self.inner.capabilities()
    }

    fn generate(&self, image: &ImageRef, patches: &[usize], n: usize, seed: u64) -> Result<Vec<String>, BackendError> {
        self.hit();
        self.inner.generate(image, patches, n, seed)
    }

    fn export_attention(&self, image: &ImageRef, question: &str) -> Result<AttentionTensor, BackendError> {
        self.hit();
        self.inner.export_attention(image, question)
    }
}

impl<B: RerankerBackend> RerankerBackend for Counted<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }

    fn score(&self, question: &str, caption: &str) -> Result<f64, BackendError> {
        self.hit();
        self.inner.score(question, caption)
    }
}

impl<B: LanguageModel> LanguageModel for Counted<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }

    fn complete(&self, prompt: &str, max_tokens: usize, seed: u64) -> Result<String, BackendError> {
        self.hit();
        self.inner.complete(prompt, max_tokens, seed)
    }
}

impl<B: ContextAnswerer> ContextAnswerer for Counted<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }

    fn answer(&self, question: &str, context: &str) -> Result<String, BackendError> {
        self.hit();
        self.inner.answer(question, context)
    }
}

impl<B: PosTagger> PosTagger for Counted<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn tag(&self, text: &str) -> Result<Vec<(String, PartOfSpeech)>, BackendError> {
        self.hit();
        self.inner.tag(text)
    }
}

const GENERIC_SUBJECTS: [&str; 8] = ["man", "woman", "dog", "cat", "bus", "horse", "boy", "girl"];
const GENERIC_ADJECTIVES: [&str; 8] = ["red", "white", "small", "large", "wooden", "black", "old", "blue"];
const GENERIC_ACTIONS: [&str; 6] = ["standing", "sitting", "walking", "riding", "holding", "looking"];
const GENERIC_PLACES: [&str; 6] = ["street", "field", "kitchen", "beach", "park", "room"];

/// Captioner that draws captions from per-image scene phrases.
///
/// The phrase for each requested caption is picked by hashing the image id,
/// the conditioning patches, the seed and the caption position. Images
/// without a scene get captions composed from a small fixed vocabulary.
/// Attention export synthesizes features, runs them through the
/// cross-attention softmax and pairs them with pseudo-random gradients.
#[derive(Debug, Clone)]
pub struct StubCaptioner {
    scenes: BTreeMap<String, Vec<String>>,
    failing: BTreeSet<String>,
    attention: bool,
    max_per_call: usize,
}

impl Default for StubCaptioner {
    fn default() -> Self {
        Self::new(BTreeMap::new())
    }
}

impl StubCaptioner {
    pub fn new(scenes: BTreeMap<String, Vec<String>>) -> Self {
        Self {
            scenes,
            failing: BTreeSet::new(),
            attention: true,
            max_per_call: 8,
        }
    }

    /// Scenes from a JSON object mapping image ids to phrase lists.
    pub fn from_scenes_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    /// Makes caption generation for `image_id` fail.
    pub fn failing_on(mut self, image_id: impl Into<String>) -> Self {
        self.failing.insert(image_id.into());
        self
    }

    pub fn without_attention(mut self) -> Self {
        self.attention = false;
        self
    }

    fn check(&self, image: &ImageRef) -> Result<(), BackendError> {
        if self.failing.contains(&image.id) {
            return Err(BackendError::fatal("stub-captioner", format!("scripted failure on image {}", image.id)));
        }
        Ok(())
    }

    fn caption(&self, image: &ImageRef, h: u64) -> String {
        match self.scenes.get(&image.id).filter(|s| !s.is_empty()) {
            Some(phrases) => phrases[(h % phrases.len() as u64) as usize].clone(),
            None => {
                let pick = |list: &[&'static str], salt: &str| list[(derive_seed(h, salt) % list.len() as u64) as usize];
                format!(
                    "a {} {} {} in the {}",
                    pick(&GENERIC_ADJECTIVES, "adj"),
                    pick(&GENERIC_SUBJECTS, "subj"),
                    pick(&GENERIC_ACTIONS, "act"),
                    pick(&GENERIC_PLACES, "place"),
                )
            }
        }
    }
}

impl CaptionerBackend for StubCaptioner {
    fn id(&self) -> &str {
        "stub-captioner"
    }

    fn capabilities(&self) -> CaptionerCapabilities {
        CaptionerCapabilities {
            max_captions_per_call: self.max_per_call,
            supports_patch_masking: true,
            supports_attention_export: self.attention,
            max_concurrency: None,
        }
    }

    fn generate(&self, image: &ImageRef, patches: &[usize], n: usize, seed: u64) -> Result<Vec<String>, BackendError> {
        self.check(image)?;
        let patch_key: String = patches.iter().map(|p| format!("{p},")).collect();
        let base = derive_seed(seed, &format!("{}|{patch_key}", image.id));
        Ok((0..n).map(|i| self.caption(image, derive_seed(base, &i.to_string()))).collect())
    }

    fn export_attention(&self, image: &ImageRef, question: &str) -> Result<AttentionTensor, BackendError> {
        if !self.attention {
            return Err(BackendError::Unsupported {
                backend_id: self.id().to_string(),
                capability: "attention export",
            });
        }
        let fail = |e: crate::relevance::RelevanceError| BackendError::fatal(self.id(), e.to_string());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0, &format!("{}|{question}", image.id)));
        let tokens = question.split_whitespace().count().clamp(1, 16);
        let mut uniform = |rows: usize, cols: usize| Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0));
        let mut values = Array3::zeros((STUB_HEADS, tokens, STUB_NUM_PATCHES));
        for mut head in values.axis_iter_mut(Axis(0)) {
            let features = FeatureMatrices {
                text_features: uniform(tokens, STUB_DIM),
                patch_features: uniform(STUB_NUM_PATCHES, STUB_DIM),
                query_proj: uniform(STUB_DIM, STUB_DIM),
                key_proj: uniform(STUB_DIM, STUB_DIM),
            };
            head.assign(&cross_attention_scores(&features).map_err(fail)?);
        }
        let grads = Array3::from_shape_fn((STUB_HEADS, tokens, STUB_NUM_PATCHES), |_| rng.random_range(-1.0..1.0));
        AttentionTensor::new(values, grads).map_err(fail)
    }
}

fn content_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

const STOPWORDS: [&str; 24] = [
    "a", "an", "the", "of", "in", "on", "at", "to", "is", "are", "and", "with", "this", "that", "what",
    "which", "it", "its", "by", "for", "next", "near", "there", "picture",
];

/// Reranker scoring lexical overlap between question and caption, plus a
/// small hash-derived offset in `[0, 0.01)` that makes the score table of a
/// fixed pair unique.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubReranker;

impl StubReranker {
    /// The hash-derived part of a score.
    pub fn jitter(question: &str, caption: &str) -> f64 {
        unit(derive_seed(0, &format!("{question}\u{1f}{caption}"))) * 0.01
    }
}

impl RerankerBackend for StubReranker {
    fn model_id(&self) -> &str {
        "stub-reranker"
    }

    fn score(&self, question: &str, caption: &str) -> Result<f64, BackendError> {
        let q: BTreeSet<String> = content_words(question).filter(|w| !STOPWORDS.contains(&w.as_str())).collect();
        let c: BTreeSet<String> = content_words(caption).collect();
        let overlap = q.intersection(&c).count() as f64;
        Ok(overlap + Self::jitter(question, caption))
    }
}

/// Language model that answers from its prompt text alone.
///
/// Prompts ending in the answer label get the most frequent content word of
/// the context (words of the question excluded), followed by a newline and a
/// spurious continuation. Any other prompt is treated as a summarization
/// request and the captions after the template's final colon are echoed.
#[derive(Debug, Clone, Default)]
pub struct StubLm {
    labels: PromptLabels,
}

impl StubLm {
    pub fn new(labels: PromptLabels) -> Self {
        Self { labels }
    }

    fn answer(&self, prompt: &str) -> String {
        let lines: Vec<&str> = prompt.lines().collect();
        let question_line = lines
            .iter()
            .rev()
            .find(|l| l.starts_with(&self.labels.question_label))
            .copied()
            .unwrap_or_default();
        let asked: BTreeSet<String> = content_words(question_line).collect();
        let context_labels = [
            &self.labels.caption_label,
            &self.labels.rerank_caption_label,
            &self.labels.summary_label,
        ];
        let mut counts: Vec<(String, usize)> = Vec::new();
        for line in &lines {
            let Some(label) = context_labels.iter().find(|l| line.starts_with(l.as_str())) else {
                continue;
            };
            for w in content_words(&line[label.len()..]) {
                if w.len() < 3 || STOPWORDS.contains(&w.as_str()) || asked.contains(&w) {
                    continue;
                }
                match counts.iter_mut().find(|(x, _)| *x == w) {
                    Some((_, n)) => *n += 1,
                    None => counts.push((w, 1)),
                }
            }
        }
        // Highest count, earliest first appearance on ties.
        let best = counts
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.1.cmp(&b.1).then(j.cmp(i)))
            .map(|(_, (w, _))| w.clone());
        match best {
            Some(w) => format!(" {w}\n{} ", self.labels.question_label),
            None => String::new(),
        }
    }
}

impl LanguageModel for StubLm {
    fn id(&self) -> &str {
        "stub-lm"
    }

    fn complete(&self, prompt: &str, max_tokens: usize, _seed: u64) -> Result<String, BackendError> {
        if prompt.trim_end().ends_with(&self.labels.answer_label) {
            return Ok(self.answer(prompt));
        }
        let body = prompt.rsplit_once(": ").map_or(prompt, |(_, rest)| rest).trim();
        let echoed = if body.is_empty() || body.ends_with(['.', '!', '?']) {
            body.to_string()
        } else {
            format!("{body}.")
        };
        Ok(truncate_to_tokens(&echoed, max_tokens))
    }
}

/// Answerer that always returns the same string.
#[derive(Debug, Clone)]
pub struct ConstantAnswerer(pub String);

impl ContextAnswerer for ConstantAnswerer {
    fn id(&self) -> &str {
        "constant-answerer"
    }

    fn answer(&self, _question: &str, _context: &str) -> Result<String, BackendError> {
        Ok(self.0.clone())
    }
}
