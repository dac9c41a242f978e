//! Zero-shot knowledge-based VQA with a frozen language model.
//!
//! An image is turned into text in stages: question-guided patch relevance,
//! region captions, question-caption reranking, a length-bounded summary and
//! synthetic question-answer pairs. The pieces are assembled into a prompt
//! and a frozen LM answers it greedily. Every model sits behind a trait so
//! stages can be swapped and cached independently.

pub mod answer;
pub mod backend;
pub mod caption;
pub mod eval;
pub mod exec;
pub mod hashing;
pub mod pipeline;
pub mod prompt;
pub mod qa;
pub mod relevance;
pub mod rerank;
pub mod stub;
pub mod summarize;
pub mod tokenize;
