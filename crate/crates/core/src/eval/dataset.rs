//! OK-VQA and A-OKVQA loaders and the per-item evaluation record.
//!
//! Both datasets are read in their published JSON layouts:
//!
//! * OK-VQA: a questions file (`{"questions": [{"image_id", "question",
//!   "question_id"}]}`) and an annotations file (`{"annotations":
//!   [{"question_id", "image_id", "answers": [{"answer", ...}]}]}`).
//! * A-OKVQA: one JSON array per split whose entries carry `question_id`,
//!   `image_id`, `question` and `direct_answers`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::answer::AnswerPrediction;
use crate::caption::ImageRef;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what} is not valid JSON: {source}")]
    Json {
        what: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("record {record_id}: {message}")]
    Schema { record_id: String, message: String },
}

impl IngestError {
    fn schema(record_id: impl Into<String>, message: impl Into<String>) -> Self {
        IngestError::Schema {
            record_id: record_id.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dataset {
    #[default]
    #[serde(rename = "okvqa")]
    OkVqa,
    #[serde(rename = "aokvqa")]
    AOkVqa,
}

impl Dataset {
    pub fn id(self) -> &'static str {
        match self {
            Dataset::OkVqa => "okvqa",
            Dataset::AOkVqa => "aokvqa",
        }
    }

    /// Split evaluated by default: OK-VQA test (published as COCO val2014),
    /// A-OKVQA val.
    pub fn default_split(self) -> Split {
        match self {
            Dataset::OkVqa => Split::Test,
            Dataset::AOkVqa => Split::Val,
        }
    }

    /// COCO file name of an image id.
    pub fn image_file_name(self, image_id: &str) -> String {
        let padded = format!("{image_id:0>12}");
        match self {
            Dataset::OkVqa => format!("COCO_val2014_{padded}.jpg"),
            Dataset::AOkVqa => format!("{padded}.jpg"),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "okvqa" => Ok(Dataset::OkVqa),
            "aokvqa" => Ok(Dataset::AOkVqa),
            _ => Err(format!("unknown dataset `{s}` (expected okvqa or aokvqa)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn id(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

/// Pipeline stage, used in cache keys and failure flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Relevance,
    Captions,
    Rerank,
    Summary,
    Qa,
    Prompt,
    Answer,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Relevance,
        Stage::Captions,
        Stage::Rerank,
        Stage::Summary,
        Stage::Qa,
        Stage::Prompt,
        Stage::Answer,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Stage::Relevance => "relevance",
            Stage::Captions => "captions",
            Stage::Rerank => "rerank",
            Stage::Summary => "summary",
            Stage::Qa => "qa",
            Stage::Prompt => "prompt",
            Stage::Answer => "answer",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Condition attached to an evaluation record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Flag {
    /// Captioner cannot export attention; whole-image captions only.
    NoAttentionExport,
    /// Weighted patch sampling saw no positive relevance.
    UniformPatchFallback,
    /// Region captioning produced nothing; whole-image captions used.
    WholeImageCaptionFallback,
    EmptyRerankSelection,
    SummaryDegraded,
    QaFilterDegraded,
    EmptyAnswer,
    StageFailed(Stage),
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Flag::NoAttentionExport => f.write_str("no_attention_export"),
            Flag::UniformPatchFallback => f.write_str("uniform_patch_fallback"),
            Flag::WholeImageCaptionFallback => f.write_str("whole_image_caption_fallback"),
            Flag::EmptyRerankSelection => f.write_str("empty_rerank_selection"),
            Flag::SummaryDegraded => f.write_str("summary_degraded"),
            Flag::QaFilterDegraded => f.write_str("qa_filter_degraded"),
            Flag::EmptyAnswer => f.write_str("empty_answer"),
            Flag::StageFailed(stage) => write!(f, "failed:{stage}"),
        }
    }
}

impl From<Flag> for String {
    fn from(flag: Flag) -> Self {
        flag.to_string()
    }
}

impl TryFrom<String> for Flag {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let flag = match s.as_str() {
            "no_attention_export" => Flag::NoAttentionExport,
            "uniform_patch_fallback" => Flag::UniformPatchFallback,
            "whole_image_caption_fallback" => Flag::WholeImageCaptionFallback,
            "empty_rerank_selection" => Flag::EmptyRerankSelection,
            "summary_degraded" => Flag::SummaryDegraded,
            "qa_filter_degraded" => Flag::QaFilterDegraded,
            "empty_answer" => Flag::EmptyAnswer,
            other => {
                let stage = other
                    .strip_prefix("failed:")
                    .and_then(|s| Stage::ALL.into_iter().find(|st| st.id() == s))
                    .ok_or_else(|| format!("unknown flag `{other}`"))?;
                Flag::StageFailed(stage)
            }
        };
        Ok(flag)
    }
}

/// One dataset item and, once processed, its prediction and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub image: ImageRef,
    pub question: String,
    /// Every annotator answer, duplicates included.
    pub gt_answers: Vec<String>,
    #[serde(default)]
    pub prediction: Option<AnswerPrediction>,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub score: f64,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn new(question_id: String, image: ImageRef, question: String, gt_answers: Vec<String>) -> Self {
        Self {
            question_id,
            image,
            question,
            gt_answers,
            prediction: None,
            prompt: None,
            score: 0.0,
            flags: BTreeSet::new(),
            error: None,
        }
    }

    /// Annotator count per distinct answer string.
    pub fn answer_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for a in &self.gt_answers {
            *counts.entry(a.as_str()).or_default() += 1;
        }
        counts
    }

    pub fn failed(&self) -> bool {
        self.flags.iter().any(|f| matches!(f, Flag::StageFailed(_)))
    }

    pub fn is_scored(&self) -> bool {
        self.prediction.is_some() || self.failed()
    }

    /// The record as loaded, without pipeline outputs.
    pub fn stub(&self) -> Self {
        Self::new(
            self.question_id.clone(),
            self.image.clone(),
            self.question.clone(),
            self.gt_answers.clone(),
        )
    }
}

fn read(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn json(text: &str, what: &str) -> Result<Value, IngestError> {
    serde_json::from_str(text).map_err(|source| IngestError::Json {
        what: what.to_string(),
        source,
    })
}

fn id_of(v: &Value, field: &str) -> Option<String> {
    match v.get(field)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn typed<T: DeserializeOwned>(v: Value, id_field: &str, index: usize) -> Result<T, IngestError> {
    let id = id_of(&v, id_field).unwrap_or_else(|| format!("#{index}"));
    serde_json::from_value(v).map_err(|e| IngestError::schema(id, e.to_string()))
}

fn list(root: &Value, key: &str, what: &str) -> Result<Vec<Value>, IngestError> {
    root.get(key)
        .and_then(Value::as_array)
        .cloned()
        .ok_or_else(|| IngestError::schema(what, format!("missing `{key}` array")))
}

#[derive(Deserialize)]
struct OkVqaQuestion {
    image_id: u64,
    question: String,
    question_id: u64,
}

#[derive(Deserialize)]
struct OkVqaAnswer {
    answer: String,
}

#[derive(Deserialize)]
struct OkVqaAnnotation {
    question_id: u64,
    image_id: u64,
    answers: Vec<OkVqaAnswer>,
}

pub fn load_okvqa(question_file: &Path, annotation_file: &Path) -> Result<Vec<EvalRecord>, IngestError> {
    parse_okvqa(&read(question_file)?, &read(annotation_file)?)
}

/// One record per question, in question-file order.
pub fn parse_okvqa(questions_json: &str, annotations_json: &str) -> Result<Vec<EvalRecord>, IngestError> {
    let questions = list(&json(questions_json, "question file")?, "questions", "question file")?;
    let annotations = list(&json(annotations_json, "annotation file")?, "annotations", "annotation file")?;

    let mut by_id: HashMap<u64, OkVqaAnnotation> = HashMap::with_capacity(annotations.len());
    for (i, raw) in annotations.into_iter().enumerate() {
        let ann: OkVqaAnnotation = typed(raw, "question_id", i)?;
        if ann.answers.is_empty() {
            return Err(IngestError::schema(ann.question_id.to_string(), "no annotator answers"));
        }
        let id = ann.question_id;
        if by_id.insert(id, ann).is_some() {
            return Err(IngestError::schema(id.to_string(), "duplicate annotation"));
        }
    }

    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(questions.len());
    for (i, raw) in questions.into_iter().enumerate() {
        let q: OkVqaQuestion = typed(raw, "question_id", i)?;
        let id = q.question_id.to_string();
        if !seen.insert(q.question_id) {
            return Err(IngestError::schema(id, "duplicate question"));
        }
        if q.question.trim().is_empty() {
            return Err(IngestError::schema(id, "empty question text"));
        }
        let ann = by_id
            .remove(&q.question_id)
            .ok_or_else(|| IngestError::schema(&id, "no annotation for question"))?;
        if ann.image_id != q.image_id {
            return Err(IngestError::schema(
                id,
                format!("image id {} in questions vs {} in annotations", q.image_id, ann.image_id),
            ));
        }
        records.push(EvalRecord::new(
            id,
            ImageRef::new(q.image_id.to_string()),
            q.question,
            ann.answers.into_iter().map(|a| a.answer).collect(),
        ));
    }
    Ok(records)
}

#[derive(Deserialize)]
struct AOkVqaEntry {
    question_id: String,
    image_id: u64,
    question: String,
    direct_answers: Option<Vec<String>>,
}

pub fn load_aokvqa(annotation_file: &Path, split: Split) -> Result<Vec<EvalRecord>, IngestError> {
    parse_aokvqa(&read(annotation_file)?, split)
}

/// Direct-answer records of one A-OKVQA split file.
pub fn parse_aokvqa(annotations_json: &str, split: Split) -> Result<Vec<EvalRecord>, IngestError> {
    let root = json(annotations_json, "A-OKVQA annotation file")?;
    let entries = root
        .as_array()
        .cloned()
        .ok_or_else(|| IngestError::schema(format!("aokvqa/{split}"), "expected a JSON array"))?;
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(entries.len());
    for (i, raw) in entries.into_iter().enumerate() {
        let e: AOkVqaEntry = typed(raw, "question_id", i)?;
        if !seen.insert(e.question_id.clone()) {
            return Err(IngestError::schema(e.question_id, "duplicate question"));
        }
        if e.question.trim().is_empty() {
            return Err(IngestError::schema(e.question_id, "empty question text"));
        }
        let answers = match e.direct_answers {
            Some(a) if !a.is_empty() => a,
            _ => return Err(IngestError::schema(e.question_id, "missing direct answers")),
        };
        records.push(EvalRecord::new(
            e.question_id,
            ImageRef::new(e.image_id.to_string()),
            e.question,
            answers,
        ));
    }
    Ok(records)
}

/// Writes records as JSON lines.
pub fn write_records(path: &Path, records: &[EvalRecord]) -> std::io::Result<()> {
    fs::write(path, records_to_jsonl(records))
}

pub fn records_to_jsonl(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_records(jsonl: &str) -> Result<Vec<EvalRecord>, IngestError> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| IngestError::Json {
                what: format!("record line {}", i + 1),
                source,
            })
        })
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, IngestError> {
    parse_records(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUESTIONS: &str = r#"{"questions": [
        {"image_id": 9, "question": "What sport is this?", "question_id": 90},
        {"image_id": 7, "question": "What room is this?", "question_id": 70}
    ]}"#;
    const ANNOTATIONS: &str = r#"{"annotations": [
        {"question_id": 70, "image_id": 7, "answers": [{"answer": "bathroom", "answer_id": 1}, {"answer": "restroom", "answer_id": 2}]},
        {"question_id": 90, "image_id": 9, "answers": [{"answer": "surfing", "answer_id": 1}]}
    ]}"#;

    #[test]
    fn okvqa_joins_questions_and_annotations() {
        let r = parse_okvqa(QUESTIONS, ANNOTATIONS).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].question_id, "90");
        assert_eq!(r[1].gt_answers, vec!["bathroom", "restroom"]);
        assert_eq!(r[1].image.id, "7");
    }

    #[test]
    fn okvqa_errors_name_the_record() {
        let missing = r#"{"annotations": [{"question_id": 90, "image_id": 9, "answers": [{"answer": "x"}]}]}"#;
        match parse_okvqa(QUESTIONS, missing) {
            Err(IngestError::Schema { record_id, .. }) => assert_eq!(record_id, "70"),
            other => panic!("unexpected {other:?}"),
        }
        let bad_type = r#"{"questions": [{"image_id": "nine", "question": "q", "question_id": 5}]}"#;
        match parse_okvqa(bad_type, ANNOTATIONS) {
            Err(IngestError::Schema { record_id, .. }) => assert_eq!(record_id, "5"),
            other => panic!("unexpected {other:?}"),
        }
        let empty = r#"{"annotations": [{"question_id": 70, "image_id": 7, "answers": []}]}"#;
        assert!(matches!(parse_okvqa(QUESTIONS, empty), Err(IngestError::Schema { .. })));
        assert!(matches!(parse_okvqa("{", ANNOTATIONS), Err(IngestError::Json { .. })));
    }

    #[test]
    fn aokvqa_direct_answers() {
        let ok = r#"[{"question_id": "a1", "image_id": 3, "question": "Why?", "choices": ["x"],
                     "correct_choice_idx": 0, "direct_answers": ["x", "y"], "rationales": []}]"#;
        let r = parse_aokvqa(ok, Split::Val).unwrap();
        assert_eq!(r[0].question_id, "a1");
        assert_eq!(r[0].gt_answers, vec!["x", "y"]);
        let missing = r#"[{"question_id": "a2", "image_id": 3, "question": "Why?"}]"#;
        match parse_aokvqa(missing, Split::Val) {
            Err(IngestError::Schema { record_id, .. }) => assert_eq!(record_id, "a2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flags_round_trip_as_strings() {
        for f in [Flag::EmptyAnswer, Flag::StageFailed(Stage::Captions), Flag::QaFilterDegraded] {
            let s = serde_json::to_string(&f).unwrap();
            assert_eq!(serde_json::from_str::<Flag>(&s).unwrap(), f);
        }
        assert_eq!(Flag::StageFailed(Stage::Rerank).to_string(), "failed:rerank");
        assert!(Flag::try_from("failed:nowhere".to_string()).is_err());
    }

    #[test]
    fn coco_file_names() {
        assert_eq!(Dataset::OkVqa.image_file_name("42"), "COCO_val2014_000000000042.jpg");
        assert_eq!(Dataset::AOkVqa.image_file_name("42"), "000000000042.jpg");
    }
}
