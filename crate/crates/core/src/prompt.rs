//! Answer-prompt serialization.
//!
//! A prompt is one instruction line, an optional `Contexts:` block holding
//! captions, the caption summary and exemplar QA pairs, and a closing
//! `Question: ...` / `Answer:` stanza. Fields are separated by a single
//! newline; there are no blank lines and no trailing whitespace.
//!
//! The *format* fixes the order of the context components. Repetition
//! formats (`S+C+QA`, `C+QA+S`) emit one unit per caption, each carrying the
//! caption, the QA pairs synthesized from it and the summary. The *content*
//! selects which components appear at all.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qa::QaPair;

pub const DEFAULT_PROMPT_ASSETS: &str = include_str!("../assets/prompt_assets.toml");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("prompt content `{content}` requires a non-empty {slot}")]
    Missing { slot: &'static str, content: PromptContent },
    #[error("target question is empty")]
    EmptyQuestion,
    #[error("QA pair refers to caption {index} but the bundle has {captions} captions")]
    OrphanQaPair { index: usize, captions: usize },
}

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("prompt assets: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("prompt assets: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLabels {
    pub contexts_label: String,
    pub caption_label: String,
    pub rerank_caption_label: String,
    pub summary_label: String,
    pub question_label: String,
    pub answer_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct AnswerSection {
    instruction: String,
    #[serde(flatten)]
    labels: PromptLabels,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SummarySection {
    template: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssetFile {
    version: u32,
    answer: AnswerSection,
    summary: SummarySection,
}

/// Every fixed string that enters a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAssets {
    pub version: u32,
    pub instruction: String,
    pub labels: PromptLabels,
    /// Summarization prompt with `{L}` and `{captions}` placeholders.
    pub summary_template: String,
}

impl PromptAssets {
    pub fn parse(text: &str) -> Result<Self, AssetError> {
        let file: AssetFile = toml::from_str(text)?;
        let l = &file.answer.labels;
        let singles = [
            ("instruction", &file.answer.instruction),
            ("contexts_label", &l.contexts_label),
            ("caption_label", &l.caption_label),
            ("rerank_caption_label", &l.rerank_caption_label),
            ("summary_label", &l.summary_label),
            ("question_label", &l.question_label),
            ("answer_label", &l.answer_label),
        ];
        for (name, value) in singles {
            if value.trim().is_empty() || value.contains(['\n', '\r']) || value.trim() != value {
                return Err(AssetError::Invalid(format!(
                    "`{name}` must be a single non-empty line without surrounding whitespace"
                )));
            }
        }
        if !file.summary.template.contains("{captions}") {
            return Err(AssetError::Invalid(
                "summary template has no `{captions}` placeholder".into(),
            ));
        }
        Ok(Self {
            version: file.version,
            instruction: file.answer.instruction,
            labels: file.answer.labels,
            summary_template: file.summary.template,
        })
    }
}

impl Default for PromptAssets {
    fn default() -> Self {
        Self::parse(DEFAULT_PROMPT_ASSETS).expect("bundled prompt assets parse")
    }
}

impl Default for PromptLabels {
    fn default() -> Self {
        PromptAssets::default().labels
    }
}

/// Order and grouping of the context components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptFormat {
    #[serde(rename = "S+C+QA")]
    SummaryCaptionQa,
    #[serde(rename = "C+QA+S")]
    CaptionQaSummary,
    #[serde(rename = "MC+MQA+S")]
    CaptionsQasSummary,
    #[serde(rename = "S+MC+MQA")]
    SummaryCaptionsQas,
    #[default]
    #[serde(rename = "MC+S+MQA")]
    CaptionsSummaryQas,
}

impl PromptFormat {
    pub const ALL: [PromptFormat; 5] = [
        PromptFormat::SummaryCaptionQa,
        PromptFormat::CaptionQaSummary,
        PromptFormat::CaptionsQasSummary,
        PromptFormat::SummaryCaptionsQas,
        PromptFormat::CaptionsSummaryQas,
    ];

    pub fn id(self) -> &'static str {
        match self {
            PromptFormat::SummaryCaptionQa => "S+C+QA",
            PromptFormat::CaptionQaSummary => "C+QA+S",
            PromptFormat::CaptionsQasSummary => "MC+MQA+S",
            PromptFormat::SummaryCaptionsQas => "S+MC+MQA",
            PromptFormat::CaptionsSummaryQas => "MC+S+MQA",
        }
    }

    /// Whether the caption/QA/summary unit is repeated per caption.
    pub fn repetition(self) -> bool {
        matches!(self, PromptFormat::SummaryCaptionQa | PromptFormat::CaptionQaSummary)
    }

    fn blocks(self) -> [Block; 3] {
        use Block::*;
        match self {
            PromptFormat::SummaryCaptionQa => [Summary, Captions, Qas],
            PromptFormat::CaptionQaSummary => [Captions, Qas, Summary],
            PromptFormat::CaptionsQasSummary => [Captions, Qas, Summary],
            PromptFormat::SummaryCaptionsQas => [Summary, Captions, Qas],
            PromptFormat::CaptionsSummaryQas => [Captions, Summary, Qas],
        }
    }
}

impl fmt::Display for PromptFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for PromptFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| format!("unknown prompt format `{s}`"))
    }
}

/// Which components the prompt carries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptContent {
    #[serde(rename = "I")]
    Instruction,
    #[serde(rename = "I+C")]
    Captions,
    #[serde(rename = "I+C+QAP")]
    CaptionsQa,
    #[serde(rename = "I+S+QAP")]
    SummaryQa,
    #[serde(rename = "I+C+S+QAP")]
    CaptionsSummaryQa,
    #[default]
    #[serde(rename = "I+RC+S+QAP")]
    RerankedSummaryQa,
}

impl PromptContent {
    pub const ALL: [PromptContent; 6] = [
        PromptContent::Instruction,
        PromptContent::Captions,
        PromptContent::CaptionsQa,
        PromptContent::SummaryQa,
        PromptContent::CaptionsSummaryQa,
        PromptContent::RerankedSummaryQa,
    ];

    pub fn id(self) -> &'static str {
        match self {
            PromptContent::Instruction => "I",
            PromptContent::Captions => "I+C",
            PromptContent::CaptionsQa => "I+C+QAP",
            PromptContent::SummaryQa => "I+S+QAP",
            PromptContent::CaptionsSummaryQa => "I+C+S+QAP",
            PromptContent::RerankedSummaryQa => "I+RC+S+QAP",
        }
    }

    pub fn has_captions(self) -> bool {
        matches!(
            self,
            PromptContent::Captions
                | PromptContent::CaptionsQa
                | PromptContent::CaptionsSummaryQa
                | PromptContent::RerankedSummaryQa
        )
    }

    /// Captions are reranked rather than taken in generation order.
    pub fn reranked(self) -> bool {
        self == PromptContent::RerankedSummaryQa
    }

    pub fn has_summary(self) -> bool {
        matches!(
            self,
            PromptContent::SummaryQa | PromptContent::CaptionsSummaryQa | PromptContent::RerankedSummaryQa
        )
    }

    pub fn has_qa(self) -> bool {
        matches!(
            self,
            PromptContent::CaptionsQa
                | PromptContent::SummaryQa
                | PromptContent::CaptionsSummaryQa
                | PromptContent::RerankedSummaryQa
        )
    }

    /// Whether any caption-derived material is needed.
    pub fn needs_captions_upstream(self) -> bool {
        self != PromptContent::Instruction
    }
}

impl fmt::Display for PromptContent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for PromptContent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.id() == s)
            .ok_or_else(|| format!("unknown prompt content `{s}`"))
    }
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Captions,
    Summary,
    Qas,
}

/// Everything that can enter an answer prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub instruction: String,
    /// Caption texts, in rerank order when reranked.
    pub captions: Vec<String>,
    pub summary: Option<String>,
    /// `source_caption_index` refers to a position in `captions`.
    pub qa_pairs: Vec<QaPair>,
    pub question: String,
}

fn one_line(s: &str) -> String {
    s.replace(['\r', '\n'], " ").trim().to_string()
}

struct Writer<'a> {
    labels: &'a PromptLabels,
    lines: Vec<String>,
}

impl Writer<'_> {
    fn labeled(&mut self, label: &str, value: &str) {
        self.lines.push(format!("{label} {}", one_line(value)));
    }

    fn qa(&mut self, pair: &QaPair) {
        let labels = self.labels;
        self.labeled(&labels.question_label, &pair.question);
        self.labeled(&labels.answer_label, &pair.answer);
    }
}

pub fn build_prompt(
    bundle: &PromptBundle,
    format: PromptFormat,
    content: PromptContent,
) -> Result<String, PromptError> {
    build_prompt_with(&PromptLabels::default(), bundle, format, content)
}

pub fn build_prompt_with(
    labels: &PromptLabels,
    bundle: &PromptBundle,
    format: PromptFormat,
    content: PromptContent,
) -> Result<String, PromptError> {
    let question = one_line(&bundle.question);
    if question.is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    let caption_label = if content.reranked() {
        &labels.rerank_caption_label
    } else {
        &labels.caption_label
    };
    if content.has_captions() && bundle.captions.is_empty() {
        return Err(PromptError::Missing {
            slot: if content.reranked() { "Rerank_Caption" } else { "Caption" },
            content,
        });
    }
    let summary = bundle.summary.as_deref().map(one_line).unwrap_or_default();
    if content.has_summary() && summary.is_empty() {
        return Err(PromptError::Missing { slot: "Summary", content });
    }
    if content.has_qa() && bundle.qa_pairs.is_empty() {
        return Err(PromptError::Missing { slot: "QA pairs", content });
    }

    let mut w = Writer {
        labels,
        lines: vec![one_line(&bundle.instruction)],
    };
    if content != PromptContent::Instruction {
        w.lines.push(labels.contexts_label.clone());
        let captions: &[String] = if content.has_captions() { &bundle.captions } else { &[] };
        let qas: &[QaPair] = if content.has_qa() { &bundle.qa_pairs } else { &[] };
        let summary = content.has_summary().then_some(summary.as_str());

        if format.repetition() && !captions.is_empty() {
            if let Some(orphan) = qas.iter().find(|p| p.source_caption_index >= captions.len()) {
                return Err(PromptError::OrphanQaPair {
                    index: orphan.source_caption_index,
                    captions: captions.len(),
                });
            }
            for (i, caption) in captions.iter().enumerate() {
                for block in format.blocks() {
                    match block {
                        Block::Captions => w.labeled(caption_label, caption),
                        Block::Summary => summary.into_iter().for_each(|s| w.labeled(&labels.summary_label, s)),
                        Block::Qas => qas
                            .iter()
                            .filter(|p| p.source_caption_index == i)
                            .for_each(|p| w.qa(p)),
                    }
                }
            }
        } else {
            for block in format.blocks() {
                match block {
                    Block::Captions => captions.iter().for_each(|c| w.labeled(caption_label, c)),
                    Block::Summary => summary.into_iter().for_each(|s| w.labeled(&labels.summary_label, s)),
                    Block::Qas => qas.iter().for_each(|p| w.qa(p)),
                }
            }
        }
    }
    w.labeled(&labels.question_label, &question);
    w.lines.push(labels.answer_label.clone());
    Ok(w.lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qa(q: &str, a: &str, src: usize) -> QaPair {
        QaPair {
            question: q.into(),
            answer: a.into(),
            template_id: "noun.0".into(),
            source_caption_index: src,
            passed_filter: true,
        }
    }

    fn bundle() -> PromptBundle {
        PromptBundle {
            instruction: PromptAssets::default().instruction,
            captions: vec!["a man in a bathroom".into(), "a white shower".into()],
            summary: Some("A man stands in a bathroom with a shower.".into()),
            qa_pairs: vec![
                qa("What item is this in this picture?", "man", 0),
                qa("What item is that in this picture?", "shower", 1),
            ],
            question: "What room is this?".into(),
        }
    }

    #[test]
    fn instruction_only() {
        let p = build_prompt(&bundle(), PromptFormat::default(), PromptContent::Instruction).unwrap();
        assert_eq!(
            p,
            "Please reason the answers to the questions according to the contexts.\n\
             Question: What room is this?\nAnswer:"
        );
    }

    #[test]
    fn best_format_full_bundle() {
        let p = build_prompt(&bundle(), PromptFormat::CaptionsSummaryQas, PromptContent::RerankedSummaryQa).unwrap();
        let expected = "Please reason the answers to the questions according to the contexts.\n\
Contexts:\n\
Rerank_Caption: a man in a bathroom\n\
Rerank_Caption: a white shower\n\
Summary: A man stands in a bathroom with a shower.\n\
Question: What item is this in this picture?\n\
Answer: man\n\
Question: What item is that in this picture?\n\
Answer: shower\n\
Question: What room is this?\n\
Answer:";
        assert_eq!(p, expected);
    }

    #[test]
    fn repetition_unit_per_caption() {
        let p = build_prompt(&bundle(), PromptFormat::CaptionQaSummary, PromptContent::CaptionsSummaryQa).unwrap();
        let lines: Vec<&str> = p.lines().collect();
        assert_eq!(
            &lines[2..8],
            &[
                "Caption: a man in a bathroom",
                "Question: What item is this in this picture?",
                "Answer: man",
                "Summary: A man stands in a bathroom with a shower.",
                "Caption: a white shower",
                "Question: What item is that in this picture?",
            ]
        );
    }

    #[test]
    fn missing_components_are_named() {
        let mut b = bundle();
        b.qa_pairs.clear();
        assert_eq!(
            build_prompt(&b, PromptFormat::default(), PromptContent::RerankedSummaryQa),
            Err(PromptError::Missing {
                slot: "QA pairs",
                content: PromptContent::RerankedSummaryQa
            })
        );
        let mut b = bundle();
        b.summary = None;
        assert!(matches!(
            build_prompt(&b, PromptFormat::default(), PromptContent::SummaryQa),
            Err(PromptError::Missing { slot: "Summary", .. })
        ));
        let mut b = bundle();
        b.question = "\n".into();
        assert_eq!(
            build_prompt(&b, PromptFormat::default(), PromptContent::Instruction),
            Err(PromptError::EmptyQuestion)
        );
    }

    #[test]
    fn orphan_pairs_rejected_in_repetition_formats() {
        let mut b = bundle();
        b.qa_pairs.push(qa("Why?", "x", 7));
        assert_eq!(
            build_prompt(&b, PromptFormat::SummaryCaptionQa, PromptContent::RerankedSummaryQa),
            Err(PromptError::OrphanQaPair { index: 7, captions: 2 })
        );
        assert!(build_prompt(&b, PromptFormat::CaptionsSummaryQas, PromptContent::RerankedSummaryQa).is_ok());
    }

    #[test]
    fn ids_round_trip() {
        for f in PromptFormat::ALL {
            assert_eq!(f.id().parse::<PromptFormat>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.id()));
        }
        for c in PromptContent::ALL {
            assert_eq!(c.id().parse::<PromptContent>().unwrap(), c);
        }
        let rep: Vec<bool> = PromptFormat::ALL.iter().map(|f| f.repetition()).collect();
        assert_eq!(rep, vec![true, true, false, false, false]);
    }

    #[test]
    fn asset_validation() {
        let bad = DEFAULT_PROMPT_ASSETS.replace("\"Answer:\"", "\"Answer: \"");
        assert!(matches!(PromptAssets::parse(&bad), Err(AssetError::Invalid(_))));
        let bad = DEFAULT_PROMPT_ASSETS.replace("{captions}", "{caps}");
        assert!(PromptAssets::parse(&bad).is_err());
        assert!(PromptAssets::parse("version = 1").is_err());
    }
}
