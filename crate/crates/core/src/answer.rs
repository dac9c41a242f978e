//! Answer generation and short-answer normalization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LanguageModel};
use crate::hashing::sha256_hex;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_new_tokens: usize,
    /// Only greedy decoding (0.0) is supported.
    pub temperature: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnswerError {
    #[error("prompt must be non-empty and end with `Answer:`")]
    MalformedPrompt,
    #[error("unsupported decode parameters: {0}")]
    DecodeParams(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerPrediction {
    /// Generation up to the first newline, trimmed.
    pub raw: String,
    pub normalized: String,
    /// SHA-256 of the prompt, hex encoded.
    pub prompt_hash: String,
    pub backend_id: String,
    pub decode_params: DecodeParams,
    /// Set when the model produced nothing usable.
    #[serde(default)]
    pub empty: bool,
}

fn check(prompt: &str, params: &DecodeParams) -> Result<(), AnswerError> {
    if prompt.trim().is_empty() || !prompt.ends_with("Answer:") {
        return Err(AnswerError::MalformedPrompt);
    }
    if params.temperature != 0.0 {
        return Err(AnswerError::DecodeParams(format!(
            "temperature {} (greedy decoding only)",
            params.temperature
        )));
    }
    if params.max_new_tokens == 0 {
        return Err(AnswerError::DecodeParams("max_new_tokens is 0".into()));
    }
    Ok(())
}

fn prediction(prompt: &str, generation: &str, backend_id: &str, params: DecodeParams) -> AnswerPrediction {
    let raw = generation.split('\n').next().unwrap_or_default().trim().to_string();
    let normalized = normalize_answer(&raw);
    AnswerPrediction {
        empty: normalized.is_empty(),
        raw,
        normalized,
        prompt_hash: sha256_hex(prompt),
        backend_id: backend_id.to_string(),
        decode_params: params,
    }
}

/// Greedy answer for a prompt that ends with `Answer:`.
pub fn answer(
    prompt: &str,
    backend: &dyn LanguageModel,
    params: DecodeParams,
) -> Result<AnswerPrediction, AnswerError> {
    check(prompt, &params)?;
    let generation = backend.complete(prompt, params.max_new_tokens, 0)?;
    Ok(prediction(prompt, &generation, backend.id(), params))
}

/// Batched form of [`answer`] with identical per-item results.
pub fn answer_batch(
    prompts: &[&str],
    backend: &dyn LanguageModel,
    params: DecodeParams,
) -> Vec<Result<AnswerPrediction, AnswerError>> {
    let mut out: Vec<Option<Result<AnswerPrediction, AnswerError>>> = prompts
        .iter()
        .map(|p| check(p, &params).err().map(Err))
        .collect();
    let valid: Vec<usize> = (0..prompts.len()).filter(|i| out[*i].is_none()).collect();
    let batch: Vec<&str> = valid.iter().map(|i| prompts[*i]).collect();
    let generations = backend.complete_batch(&batch, params.max_new_tokens, 0);
    for (i, generation) in valid.into_iter().zip(generations) {
        out[i] = Some(
            generation
                .map(|g| prediction(prompts[i], &g, backend.id(), params))
                .map_err(AnswerError::from),
        );
    }
    out.into_iter()
        .map(|r| r.unwrap_or_else(|| Err(BackendError::fatal(backend.id(), "batch result missing").into())))
        .collect()
}

const NUMBER_WORDS: [&str; 11] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

/// Lowercase, drop punctuation and the articles a/an/the, map zero..ten to
/// digits and collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(|w| match NUMBER_WORDS.iter().position(|n| *n == w) {
            Some(d) => d.to_string(),
            None => w.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("A dog."), "dog");
        assert_eq!(normalize_answer("The  TWO men"), "2 men");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  An apple, the pie!  "), "apple pie");
        assert_eq!(normalize_answer("Ten"), "10");
        assert_eq!(normalize_answer("eleven"), "eleven");
    }

    struct Scripted(&'static str);
    impl LanguageModel for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }
        fn complete(&self, _p: &str, _max: usize, _seed: u64) -> Result<String, BackendError> {
            Ok(self.0.to_string())
        }
    }

    const PROMPT: &str = "I\nQuestion: What?\nAnswer:";

    #[test]
    fn truncates_at_newline_and_normalizes() {
        let p = answer(PROMPT, &Scripted("A dog.\nQuestion:"), DecodeParams::default()).unwrap();
        assert_eq!(p.raw, "A dog.");
        assert_eq!(p.normalized, "dog");
        assert!(!p.empty);
        assert_eq!(p.prompt_hash, sha256_hex(PROMPT));
    }

    #[test]
    fn empty_generation_is_flagged() {
        let p = answer(PROMPT, &Scripted(""), DecodeParams::default()).unwrap();
        assert!(p.empty);
        assert_eq!(p.normalized, "");
        let p = answer(PROMPT, &Scripted("\nsomething"), DecodeParams::default()).unwrap();
        assert!(p.empty);
    }

    #[test]
    fn deterministic_for_same_prompt() {
        let b = Scripted(" the cat\n");
        let a1 = answer(PROMPT, &b, DecodeParams::default()).unwrap();
        let a2 = answer(PROMPT, &b, DecodeParams::default()).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn rejects_bad_prompts_and_params() {
        let b = Scripted("x");
        assert_eq!(answer("", &b, DecodeParams::default()), Err(AnswerError::MalformedPrompt));
        assert_eq!(answer("Answer: ", &b, DecodeParams::default()), Err(AnswerError::MalformedPrompt));
        let hot = DecodeParams {
            temperature: 0.7,
            ..DecodeParams::default()
        };
        assert!(matches!(answer(PROMPT, &b, hot), Err(AnswerError::DecodeParams(_))));
    }

    #[test]
    fn batch_matches_single_calls() {
        let b = Scripted("Two dogs\n");
        let prompts = [PROMPT, "bad", "Q\nAnswer:"];
        let batch = answer_batch(&prompts, &b, DecodeParams::default());
        assert_eq!(batch.len(), 3);
        for (p, r) in prompts.iter().zip(&batch) {
            assert_eq!(r, &answer(p, &b, DecodeParams::default()));
        }
    }
}
