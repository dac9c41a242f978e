//! Exemplar question-answer synthesis from captions.
//!
//! Three steps: pull candidate answer words out of each caption by part of
//! speech, expand each candidate through the question templates registered
//! for its part of speech, then keep only the pairs that an answerer, given
//! just the caption, answers consistently.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::normalize_answer;
use crate::backend::BackendError;
use crate::caption::Caption;

/// Placeholder in adjective templates, replaced by the adjective's type.
pub const ADJ_TYPE_PLACEHOLDER: &str = "ADJ TYPE";
/// Type used for adjectives absent from the type lexicon.
pub const DEFAULT_ADJ_TYPE: &str = "attribute";
/// Upper bound on QA pairs per item, applied before consistency filtering.
pub const DEFAULT_QA_CAP: usize = 30;

pub const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.txt");
pub const DEFAULT_POS_LEXICON: &str = include_str!("../assets/pos_lexicon.txt");
pub const DEFAULT_ADJ_TYPES: &str = include_str!("../assets/adj_types.txt");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QaError {
    #[error("caption text is empty")]
    EmptyCaption,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct AssetParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartOfSpeech {
    Noun,
    Verb,
    Adjective,
}

impl PartOfSpeech {
    pub const ALL: [PartOfSpeech; 3] = [PartOfSpeech::Noun, PartOfSpeech::Verb, PartOfSpeech::Adjective];

    pub fn as_str(self) -> &'static str {
        match self {
            PartOfSpeech::Noun => "noun",
            PartOfSpeech::Verb => "verb",
            PartOfSpeech::Adjective => "adjective",
        }
    }
}

impl fmt::Display for PartOfSpeech {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartOfSpeech {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noun" => Ok(PartOfSpeech::Noun),
            "verb" => Ok(PartOfSpeech::Verb),
            "adjective" => Ok(PartOfSpeech::Adjective),
            other => Err(format!("unknown part of speech `{other}`")),
        }
    }
}

/// Parses `key: word word ...` lines, skipping blanks and `#` comments.
fn parse_keyed_lines(text: &str) -> Result<Vec<(usize, String, String)>, AssetParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line.split_once(':').ok_or_else(|| AssetParseError {
            line: i + 1,
            message: "expected `key: value`".into(),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(AssetParseError {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((i + 1, key.to_string(), rest.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub id: String,
    pub pos: PartOfSpeech,
    pub text: String,
}

impl QuestionTemplate {
    pub fn has_placeholder(&self) -> bool {
        self.text.contains(ADJ_TYPE_PLACEHOLDER)
    }

    pub fn render(&self, adj_type: Option<&str>) -> String {
        if self.has_placeholder() {
            self.text
                .replace(ADJ_TYPE_PLACEHOLDER, adj_type.unwrap_or(DEFAULT_ADJ_TYPE))
        } else {
            self.text.clone()
        }
    }

    /// `Some(substituted_type)` when `question` is an instance of this
    /// template; the inner value is `None` for templates without a placeholder.
    fn matches(&self, question: &str) -> Option<Option<String>> {
        match self.text.split_once(ADJ_TYPE_PLACEHOLDER) {
            None => (self.text == question).then_some(None),
            Some((prefix, suffix)) => {
                let middle = question.strip_prefix(prefix)?.strip_suffix(suffix)?;
                (!middle.is_empty()).then(|| Some(middle.to_string()))
            }
        }
    }
}

/// Question templates keyed by part of speech.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    templates: Vec<QuestionTemplate>,
}

impl TemplateRegistry {
    pub fn parse(text: &str) -> Result<Self, AssetParseError> {
        let mut templates = Vec::new();
        let mut counts: BTreeMap<PartOfSpeech, usize> = BTreeMap::new();
        for (line, key, question) in parse_keyed_lines(text)? {
            let pos: PartOfSpeech = key.parse().map_err(|message| AssetParseError { line, message })?;
            if !question.ends_with('?') {
                return Err(AssetParseError {
                    line,
                    message: "question template must end with `?`".into(),
                });
            }
            if question.matches(ADJ_TYPE_PLACEHOLDER).count() > 1 {
                return Err(AssetParseError {
                    line,
                    message: format!("more than one `{ADJ_TYPE_PLACEHOLDER}` placeholder"),
                });
            }
            if question.contains('\n') || question.len() < 2 {
                return Err(AssetParseError {
                    line,
                    message: "question template is empty".into(),
                });
            }
            let n = counts.entry(pos).or_default();
            templates.push(QuestionTemplate {
                id: format!("{pos}.{n}"),
                pos,
                text: question,
            });
            *n += 1;
        }
        Ok(Self { templates })
    }

    pub fn for_pos(&self, pos: PartOfSpeech) -> impl Iterator<Item = &QuestionTemplate> {
        self.templates.iter().filter(move |t| t.pos == pos)
    }

    pub fn templates(&self) -> &[QuestionTemplate] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<&QuestionTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    /// Finds the template a rendered question came from, with the substituted
    /// adjective type if any.
    pub fn identify(&self, question: &str) -> Option<(&QuestionTemplate, Option<String>)> {
        self.templates
            .iter()
            .find_map(|t| t.matches(question).map(|ty| (t, ty)))
    }
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled template registry parses")
    }
}

/// Adjective to adjective-type mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdjTypeLexicon {
    types: BTreeMap<String, String>,
}

impl AdjTypeLexicon {
    pub fn parse(text: &str) -> Result<Self, AssetParseError> {
        let mut types = BTreeMap::new();
        for (_, ty, words) in parse_keyed_lines(text)? {
            for w in words.split_whitespace() {
                types.insert(w.to_lowercase(), ty.clone());
            }
        }
        Ok(Self { types })
    }

    pub fn type_of(&self, adjective: &str) -> &str {
        self.types
            .get(&adjective.to_lowercase())
            .map_or(DEFAULT_ADJ_TYPE, String::as_str)
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_ADJ_TYPES).expect("bundled adjective lexicon parses")
    }
}

/// Part-of-speech tagger. Returns tagged words in text order.
pub trait PosTagger: Send + Sync {
    fn id(&self) -> &str;
    fn tag(&self, text: &str) -> Result<Vec<(String, PartOfSpeech)>, BackendError>;
}

/// Closed-word-list tagger; unknown words ending in "ing" count as verbs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleBasedTagger {
    words: BTreeMap<String, Vec<PartOfSpeech>>,
}

impl RuleBasedTagger {
    pub fn parse(text: &str) -> Result<Self, AssetParseError> {
        let mut words: BTreeMap<String, Vec<PartOfSpeech>> = BTreeMap::new();
        for (line, key, list) in parse_keyed_lines(text)? {
            let pos: PartOfSpeech = key.parse().map_err(|message| AssetParseError { line, message })?;
            for w in list.split_whitespace() {
                let tags = words.entry(w.to_lowercase()).or_default();
                if !tags.contains(&pos) {
                    tags.push(pos);
                }
            }
        }
        Ok(Self { words })
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_POS_LEXICON).expect("bundled POS lexicon parses")
    }
}

impl PosTagger for RuleBasedTagger {
    fn id(&self) -> &str {
        "rule-based"
    }

    fn tag(&self, text: &str) -> Result<Vec<(String, PartOfSpeech)>, BackendError> {
        let mut out = Vec::new();
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let lower = word.to_lowercase();
            match self.words.get(&lower) {
                Some(tags) => out.extend(tags.iter().map(|p| (word.to_string(), *p))),
                None if lower.len() >= 5 && lower.ends_with("ing") => {
                    out.push((word.to_string(), PartOfSpeech::Verb))
                }
                None => {}
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerCandidate {
    pub span: String,
    pub pos: PartOfSpeech,
    pub source_caption_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adj_type: Option<String>,
}

/// Noun, verb and adjective spans of `caption`, grouped in that order and
/// deduplicated by `(span, pos)`.
pub fn extract_answer_candidates(
    caption: &Caption,
    source_caption_index: usize,
    tagger: &dyn PosTagger,
    adj_types: &AdjTypeLexicon,
) -> Result<Vec<AnswerCandidate>, QaError> {
    if caption.text.trim().is_empty() {
        return Err(QaError::EmptyCaption);
    }
    let mut tagged = tagger.tag(&caption.text)?;
    tagged.retain(|(span, _)| !span.is_empty() && caption.text.contains(span.as_str()));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for pos in PartOfSpeech::ALL {
        for (span, p) in &tagged {
            if *p != pos || !seen.insert((span.clone(), pos)) {
                continue;
            }
            out.push(AnswerCandidate {
                span: span.clone(),
                pos,
                source_caption_index,
                adj_type: (pos == PartOfSpeech::Adjective).then(|| adj_types.type_of(span).to_string()),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub template_id: String,
    pub source_caption_index: usize,
    pub passed_filter: bool,
}

/// Every template registered for the candidate's part of speech, answered by
/// the candidate span.
pub fn instantiate_questions(candidate: &AnswerCandidate, registry: &TemplateRegistry) -> Vec<QaPair> {
    registry
        .for_pos(candidate.pos)
        .map(|t| QaPair {
            question: t.render(candidate.adj_type.as_deref()),
            answer: candidate.span.clone(),
            template_id: t.id.clone(),
            source_caption_index: candidate.source_caption_index,
            passed_filter: false,
        })
        .collect()
}

/// Answers a question from a short text context.
pub trait ContextAnswerer: Send + Sync {
    fn id(&self) -> &str;

    fn max_concurrency(&self) -> Option<usize> {
        None
    }

    fn answer(&self, question: &str, context: &str) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub pairs: Vec<QaPair>,
    /// The answerer failed; `pairs` is the unfiltered input.
    pub degraded: bool,
}

/// Keeps the pairs whose answer the answerer reproduces from the caption
/// alone, compared after answer normalization.
pub fn filter_qa_pairs(pairs: Vec<QaPair>, caption: &Caption, answerer: &dyn ContextAnswerer) -> FilterOutcome {
    let mut verdicts = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        match answerer.answer(&pair.question, &caption.text) {
            Ok(predicted) => verdicts.push(normalize_answer(&predicted) == normalize_answer(&pair.answer)),
            Err(e) => {
                log::warn!("QA consistency filter degraded: {e}");
                return FilterOutcome { pairs, degraded: true };
            }
        }
    }
    let pairs = pairs
        .into_iter()
        .zip(verdicts)
        .filter_map(|(mut p, ok)| {
            ok.then(|| {
                p.passed_filter = true;
                p
            })
        })
        .collect();
    FilterOutcome {
        pairs,
        degraded: false,
    }
}

/// Rule-based answerer for the consistency filter. It maps the question back
/// to its template and answers with the first caption word carrying the
/// template's part of speech (and adjective type, where substituted).
pub struct TemplateAnswerer<T> {
    registry: TemplateRegistry,
    tagger: T,
    adj_types: AdjTypeLexicon,
}

impl<T: PosTagger> TemplateAnswerer<T> {
    pub fn new(registry: TemplateRegistry, tagger: T, adj_types: AdjTypeLexicon) -> Self {
        Self {
            registry,
            tagger,
            adj_types,
        }
    }
}

impl<T: PosTagger> ContextAnswerer for TemplateAnswerer<T> {
    fn id(&self) -> &str {
        "template-answerer"
    }

    fn answer(&self, question: &str, context: &str) -> Result<String, BackendError> {
        let Some((template, adj_type)) = self.registry.identify(question) else {
            return Ok(String::new());
        };
        let tags = self.tagger.tag(context)?;
        let found = tags.into_iter().find(|(span, pos)| {
            *pos == template.pos
                && adj_type
                    .as_deref()
                    .is_none_or(|ty| self.adj_types.type_of(span) == ty)
        });
        Ok(found.map(|(span, _)| span).unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Synthesis {
    pub pairs: Vec<QaPair>,
    pub degraded: bool,
}

/// Runs the full synthesis over captions given in rerank order. At most
/// `cap` unfiltered pairs are produced, earlier captions first.
pub fn synthesize(
    captions: &[Caption],
    tagger: &dyn PosTagger,
    adj_types: &AdjTypeLexicon,
    registry: &TemplateRegistry,
    answerer: &dyn ContextAnswerer,
    cap: usize,
) -> Result<Synthesis, QaError> {
    let mut raw: Vec<QaPair> = Vec::new();
    'outer: for (i, caption) in captions.iter().enumerate() {
        for candidate in extract_answer_candidates(caption, i, tagger, adj_types)? {
            for pair in instantiate_questions(&candidate, registry) {
                if raw.len() == cap {
                    break 'outer;
                }
                raw.push(pair);
            }
        }
    }

    let mut pairs = Vec::new();
    let mut degraded = false;
    for (i, caption) in captions.iter().enumerate() {
        let group: Vec<QaPair> = raw.iter().filter(|p| p.source_caption_index == i).cloned().collect();
        if group.is_empty() {
            continue;
        }
        let outcome = filter_qa_pairs(group, caption, answerer);
        degraded |= outcome.degraded;
        pairs.extend(outcome.pairs);
    }
    Ok(Synthesis { pairs, degraded })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caption(text: &str) -> Caption {
        Caption {
            text: text.into(),
            patch_indices: vec![],
            backend_id: "t".into(),
            gen_index: 0,
        }
    }

    fn extract(text: &str) -> Vec<(String, PartOfSpeech)> {
        extract_answer_candidates(&caption(text), 0, &RuleBasedTagger::bundled(), &AdjTypeLexicon::bundled())
            .unwrap()
            .into_iter()
            .map(|c| (c.span, c.pos))
            .collect()
    }

    #[test]
    fn bundled_registry_shape() {
        let r = TemplateRegistry::default();
        assert_eq!(r.for_pos(PartOfSpeech::Noun).count(), 2);
        assert_eq!(r.for_pos(PartOfSpeech::Verb).count(), 4);
        assert_eq!(r.for_pos(PartOfSpeech::Adjective).count(), 3);
        assert_eq!(r.get("verb.3").unwrap().text, "What action is the item doing in this picture?");
    }

    #[test]
    fn extraction_golden_sentences() {
        assert_eq!(
            extract("a red ball"),
            vec![
                ("ball".to_string(), PartOfSpeech::Noun),
                ("red".to_string(), PartOfSpeech::Adjective)
            ]
        );
        assert_eq!(extract("running"), vec![("running".to_string(), PartOfSpeech::Verb)]);
    }

    #[test]
    fn extraction_dedups_and_tags_adj_type() {
        let c = extract_answer_candidates(
            &caption("a red dog and a red dog"),
            3,
            &RuleBasedTagger::bundled(),
            &AdjTypeLexicon::bundled(),
        )
        .unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].adj_type.as_deref(), Some("color"));
        assert_eq!(c[0].adj_type, None);
        assert!(c.iter().all(|c| c.source_caption_index == 3));
    }

    #[test]
    fn empty_caption_rejected() {
        let r = extract_answer_candidates(&caption("  "), 0, &RuleBasedTagger::bundled(), &AdjTypeLexicon::bundled());
        assert_eq!(r, Err(QaError::EmptyCaption));
    }

    fn candidate(span: &str, pos: PartOfSpeech, adj_type: Option<&str>) -> AnswerCandidate {
        AnswerCandidate {
            span: span.into(),
            pos,
            source_caption_index: 0,
            adj_type: adj_type.map(str::to_string),
        }
    }

    #[test]
    fn noun_questions() {
        let pairs = instantiate_questions(&candidate("ball", PartOfSpeech::Noun, None), &TemplateRegistry::default());
        let qs: Vec<&str> = pairs.iter().map(|p| p.question.as_str()).collect();
        assert_eq!(
            qs,
            vec!["What item is this in this picture?", "What item is that in this picture?"]
        );
        assert!(pairs.iter().all(|p| p.answer == "ball"));
    }

    #[test]
    fn verb_and_adjective_questions() {
        let r = TemplateRegistry::default();
        let verbs = instantiate_questions(&candidate("running", PartOfSpeech::Verb, None), &r);
        assert_eq!(verbs.len(), 4);
        assert_eq!(verbs[0].question, "What action is being taken in this picture?");
        let adj = instantiate_questions(&candidate("red", PartOfSpeech::Adjective, Some("color")), &r);
        assert!(adj.iter().any(|p| p.question == "What is the item's color in this picture?"));
        let adj = instantiate_questions(&candidate("odd", PartOfSpeech::Adjective, None), &r);
        assert_eq!(adj[2].question, "What is the attribute in this picture?");
    }

    #[test]
    fn registry_parse_errors() {
        assert_eq!(TemplateRegistry::parse("pronoun: Who?").unwrap_err().line, 1);
        assert_eq!(TemplateRegistry::parse("# c\n\nnoun: What").unwrap_err().line, 3);
        assert!(TemplateRegistry::parse("no colon here").is_err());
        assert!(TemplateRegistry::parse("").unwrap().templates().is_empty());
        let twice = "adjective: Is the ADJ TYPE the ADJ TYPE?";
        assert!(TemplateRegistry::parse(twice).unwrap_err().message.contains("more than one"));
    }

    #[test]
    fn identify_round_trips_rendered_templates() {
        let r = TemplateRegistry::default();
        for t in r.templates() {
            let q = t.render(Some("color"));
            let (found, ty) = r.identify(&q).unwrap();
            assert_eq!(found.id, t.id);
            assert_eq!(ty.is_some(), t.has_placeholder());
        }
        assert!(r.identify("Who is there?").is_none());
    }

    struct Fixed(&'static str);
    impl ContextAnswerer for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }
        fn answer(&self, _q: &str, _c: &str) -> Result<String, BackendError> {
            Ok(self.0.to_string())
        }
    }

    struct Broken;
    impl ContextAnswerer for Broken {
        fn id(&self) -> &str {
            "broken"
        }
        fn answer(&self, _q: &str, _c: &str) -> Result<String, BackendError> {
            Err(BackendError::retriable("broken", "down"))
        }
    }

    #[test]
    fn adversarial_answerer_rejects_everything() {
        let pairs = instantiate_questions(&candidate("ball", PartOfSpeech::Noun, None), &TemplateRegistry::default());
        let out = filter_qa_pairs(pairs, &caption("a ball"), &Fixed("xyz"));
        assert!(out.pairs.is_empty());
        assert!(!out.degraded);
    }

    #[test]
    fn failing_answerer_passes_pairs_through() {
        let pairs = instantiate_questions(&candidate("ball", PartOfSpeech::Noun, None), &TemplateRegistry::default());
        let out = filter_qa_pairs(pairs.clone(), &caption("a ball"), &Broken);
        assert!(out.degraded);
        assert_eq!(out.pairs, pairs);
    }

    #[test]
    fn template_answerer_is_consistent_on_first_candidates() {
        let answerer = TemplateAnswerer::new(
            TemplateRegistry::default(),
            RuleBasedTagger::bundled(),
            AdjTypeLexicon::bundled(),
        );
        let caps = vec![caption("a red ball next to a blue car")];
        let out = synthesize(
            &caps,
            &RuleBasedTagger::bundled(),
            &AdjTypeLexicon::bundled(),
            &TemplateRegistry::default(),
            &answerer,
            DEFAULT_QA_CAP,
        )
        .unwrap();
        assert!(!out.degraded);
        let kept: Vec<(&str, &str)> = out
            .pairs
            .iter()
            .map(|p| (p.template_id.as_str(), p.answer.as_str()))
            .collect();
        // "ball" is the first noun; "red" the first adjective and the first
        // color; "blue" never wins a question.
        assert_eq!(
            kept,
            vec![
                ("noun.0", "ball"),
                ("noun.1", "ball"),
                ("adjective.0", "red"),
                ("adjective.1", "red"),
                ("adjective.2", "red"),
            ]
        );
    }

    #[test]
    fn synthesis_respects_cap_in_caption_order() {
        let caps = vec![caption("a dog running on grass"), caption("a red car")];
        let out = synthesize(
            &caps,
            &RuleBasedTagger::bundled(),
            &AdjTypeLexicon::bundled(),
            &TemplateRegistry::default(),
            &Broken,
            5,
        )
        .unwrap();
        assert!(out.degraded);
        assert_eq!(out.pairs.len(), 5);
        assert!(out.pairs.iter().all(|p| p.source_caption_index == 0));
    }
}
