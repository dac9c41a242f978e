//! Reference tokenizer used for every length limit in the pipeline.
//!
//! A token is a maximal run of alphanumeric characters or a single
//! punctuation/symbol character. Whitespace separates tokens and is never
//! part of one. Backend-native token counts are not the contract.

/// Byte span `[start, end)` of one token.
pub type Span = (usize, usize);

pub fn token_spans(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            spans.push((s, i));
        }
        if !c.is_whitespace() {
            spans.push((i, i + c.len_utf8()));
        }
    }
    if let Some(s) = word_start {
        spans.push((s, text.len()));
    }
    spans
}

pub fn count_tokens(text: &str) -> usize {
    token_spans(text).len()
}

fn is_sentence_end(token: &str) -> bool {
    matches!(token, "." | "!" | "?")
}

/// Cuts `text` to at most `max_tokens` tokens. When it has to cut, it ends at
/// the last sentence terminator inside the window if there is one.
pub fn truncate_to_tokens(text: &str, max_tokens: usize) -> String {
    let spans = token_spans(text);
    if spans.len() <= max_tokens {
        return text.trim().to_string();
    }
    if max_tokens == 0 {
        return String::new();
    }
    let window = &spans[..max_tokens];
    let end = window
        .iter()
        .rev()
        .find(|(s, e)| is_sentence_end(&text[*s..*e]))
        .map_or(window[max_tokens - 1].1, |(_, e)| *e);
    text[..end].trim().to_string()
}
