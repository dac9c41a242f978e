//! Per-item stage execution and the worker pool.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{answer, AnswerError, AnswerPrediction};
use crate::backend::{BackendError, LanguageModel};
use crate::caption::{dedup_captions, generate_captions, Caption, CaptionError, CaptionerBackend};
use crate::eval::{
    aggregate, dataset, vqa_soft_accuracy, AggregateError, Dataset, EvalRecord, Flag, IngestError, ResultsTable, Stage,
};
use crate::exec::{ExecBackend, EXEC_PREFIX};
use crate::hashing::{derive_seed, sha256_hex};
use crate::pipeline::cache::StageCache;
use crate::pipeline::config::{AssetDigests, AssetPaths, ConfigError, PipelineConfig, StageHashes};
use crate::prompt::{build_prompt_with, PromptAssets, PromptBundle, DEFAULT_PROMPT_ASSETS};
use crate::qa::{
    synthesize, AdjTypeLexicon, ContextAnswerer, PosTagger, QaError, RuleBasedTagger, Synthesis, TemplateAnswerer,
    TemplateRegistry, DEFAULT_ADJ_TYPES, DEFAULT_POS_LEXICON, DEFAULT_TEMPLATES,
};
use crate::relevance::{patch_relevance, sample_patches, PatchSelection, RelevanceMap};
use crate::rerank::{score_pair, select_top_captions, CaptionSelection, RerankError, RerankerBackend, ScoredCaption};
use crate::stub::{StubCaptioner, StubLm, StubReranker};
use crate::summarize::{Summarizer, Summary, LENGTH_SLACK};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown {role} backend `{spec}`")]
    UnknownBackend { role: &'static str, spec: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("item {question_id} failed at {stage}: {message}")]
    Item {
        question_id: String,
        stage: Stage,
        message: String,
    },
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::UnknownBackend { .. } => 2,
            PipelineError::Ingest(_) => 3,
            PipelineError::Item { .. } => 4,
            PipelineError::Aggregate(_) | PipelineError::Io(_) => 1,
        }
    }
}

/// Editable text assets and their digests.
#[derive(Debug, Clone)]
pub struct Assets {
    pub templates: TemplateRegistry,
    pub adj_types: AdjTypeLexicon,
    pub tagger: RuleBasedTagger,
    pub prompt: PromptAssets,
    /// Scene phrases for the stub captioner, as JSON.
    pub scenes: Option<String>,
    pub digests: AssetDigests,
}

impl Default for Assets {
    fn default() -> Self {
        Self::from_texts(DEFAULT_TEMPLATES, DEFAULT_POS_LEXICON, DEFAULT_ADJ_TYPES, DEFAULT_PROMPT_ASSETS, None)
            .expect("bundled assets are valid")
    }
}

impl Assets {
    pub fn from_texts(
        templates: &str,
        pos_lexicon: &str,
        adj_types: &str,
        prompt: &str,
        scenes: Option<&str>,
    ) -> Result<Self, ConfigError> {
        let invalid = |what: &str, e: &dyn std::fmt::Display| ConfigError::Invalid(format!("{what}: {e}"));
        if let Some(s) = scenes {
            serde_json::from_str::<BTreeMap<String, Vec<String>>>(s).map_err(|e| invalid("scenes", &e))?;
        }
        Ok(Self {
            templates: TemplateRegistry::parse(templates).map_err(|e| invalid("templates", &e))?,
            adj_types: AdjTypeLexicon::parse(adj_types).map_err(|e| invalid("adjective types", &e))?,
            tagger: RuleBasedTagger::parse(pos_lexicon).map_err(|e| invalid("POS lexicon", &e))?,
            prompt: PromptAssets::parse(prompt).map_err(|e| invalid("prompt assets", &e))?,
            scenes: scenes.map(str::to_string),
            digests: AssetDigests {
                templates: sha256_hex(templates),
                pos_lexicon: sha256_hex(pos_lexicon),
                adj_types: sha256_hex(adj_types),
                prompt: sha256_hex(prompt),
                scenes: scenes.map(sha256_hex).unwrap_or_default(),
            },
        })
    }

    /// Bundled assets with any configured file replacing its default.
    pub fn load(paths: &AssetPaths) -> Result<Self, ConfigError> {
        fn read(path: &Option<std::path::PathBuf>, default: &str) -> Result<String, ConfigError> {
            match path {
                Some(p) => fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.clone(), source }),
                None => Ok(default.to_string()),
            }
        }
        let scenes = match &paths.scenes {
            Some(_) => Some(read(&paths.scenes, "")?),
            None => None,
        };
        Self::from_texts(
            &read(&paths.templates, DEFAULT_TEMPLATES)?,
            &read(&paths.pos_lexicon, DEFAULT_POS_LEXICON)?,
            &read(&paths.adj_types, DEFAULT_ADJ_TYPES)?,
            &read(&paths.prompt, DEFAULT_PROMPT_ASSETS)?,
            scenes.as_deref(),
        )
    }
}

/// One backend per role.
#[derive(Clone)]
pub struct Backends {
    pub captioner: Arc<dyn CaptionerBackend>,
    pub reranker: Arc<dyn RerankerBackend>,
    pub summarizer: Arc<dyn LanguageModel>,
    pub answerer: Arc<dyn LanguageModel>,
    pub qa_answerer: Arc<dyn ContextAnswerer>,
    pub tagger: Arc<dyn PosTagger>,
}

impl Backends {
    /// All roles served by the in-process stubs.
    pub fn stub(assets: &Assets) -> Self {
        let lm = Arc::new(StubLm::new(assets.prompt.labels.clone()));
        Self {
            captioner: Arc::new(stub_captioner(assets)),
            reranker: Arc::new(StubReranker),
            summarizer: lm.clone(),
            answerer: lm,
            qa_answerer: Arc::new(rule_based_answerer(assets)),
            tagger: Arc::new(assets.tagger.clone()),
        }
    }

    /// Resolves the backend specs of `config`. `exec:` roles that share a
    /// command share one process.
    pub fn from_config(config: &PipelineConfig, assets: &Assets) -> Result<Self, PipelineError> {
        let mut processes: BTreeMap<String, Arc<ExecBackend>> = BTreeMap::new();
        let mut exec = |role: &'static str, spec: &str| -> Result<Option<Arc<ExecBackend>>, PipelineError> {
            if !spec.starts_with(EXEC_PREFIX) {
                return Ok(None);
            }
            if let Some(b) = processes.get(spec) {
                return Ok(Some(b.clone()));
            }
            let backend = Arc::new(ExecBackend::from_spec(spec).ok_or_else(|| PipelineError::UnknownBackend {
                role,
                spec: spec.to_string(),
            })?);
            processes.insert(spec.to_string(), backend.clone());
            Ok(Some(backend))
        };
        let unknown = |role: &'static str, spec: &str| PipelineError::UnknownBackend {
            role,
            spec: spec.to_string(),
        };
        let b = &config.backends;
        let stub_lm = || Arc::new(StubLm::new(assets.prompt.labels.clone()));

        let captioner: Arc<dyn CaptionerBackend> = match (b.captioner.as_str(), exec("captioner", &b.captioner)?) {
            (_, Some(e)) => e,
            ("stub", _) => Arc::new(stub_captioner(assets)),
            (s, _) => return Err(unknown("captioner", s)),
        };
        let reranker: Arc<dyn RerankerBackend> = match (b.reranker.as_str(), exec("reranker", &b.reranker)?) {
            (_, Some(e)) => e,
            ("stub", _) => Arc::new(StubReranker),
            (s, _) => return Err(unknown("reranker", s)),
        };
        let summarizer: Arc<dyn LanguageModel> = match (b.summarizer.as_str(), exec("summarizer", &b.summarizer)?) {
            (_, Some(e)) => e,
            ("stub", _) => stub_lm(),
            (s, _) => return Err(unknown("summarizer", s)),
        };
        let answerer: Arc<dyn LanguageModel> = match (b.answerer.as_str(), exec("answerer", &b.answerer)?) {
            (_, Some(e)) => e,
            ("stub", _) => stub_lm(),
            (s, _) => return Err(unknown("answerer", s)),
        };
        let qa_answerer: Arc<dyn ContextAnswerer> = match (b.qa_answerer.as_str(), exec("qa_answerer", &b.qa_answerer)?) {
            (_, Some(e)) => e,
            ("rule-based" | "stub", _) => Arc::new(rule_based_answerer(assets)),
            (s, _) => return Err(unknown("qa_answerer", s)),
        };
        let tagger: Arc<dyn PosTagger> = match (b.tagger.as_str(), exec("tagger", &b.tagger)?) {
            (_, Some(e)) => e,
            ("rule-based" | "stub", _) => Arc::new(assets.tagger.clone()),
            (s, _) => return Err(unknown("tagger", s)),
        };
        Ok(Self {
            captioner,
            reranker,
            summarizer,
            answerer,
            qa_answerer,
            tagger,
        })
    }

    /// Tightest concurrency limit declared by any backend.
    pub fn max_concurrency(&self) -> Option<usize> {
        [
            self.captioner.capabilities().max_concurrency,
            self.reranker.max_concurrency(),
            self.summarizer.max_concurrency(),
            self.answerer.max_concurrency(),
            self.qa_answerer.max_concurrency(),
        ]
        .into_iter()
        .flatten()
        .min()
    }
}

fn stub_captioner(assets: &Assets) -> StubCaptioner {
    assets
        .scenes
        .as_deref()
        .map(|s| StubCaptioner::from_scenes_json(s).expect("scenes validated on load"))
        .unwrap_or_default()
}

fn rule_based_answerer(assets: &Assets) -> TemplateAnswerer<RuleBasedTagger> {
    TemplateAnswerer::new(assets.templates.clone(), assets.tagger.clone(), assets.adj_types.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RelevanceArtifact {
    /// `None` when the captioner cannot export attention.
    map: Option<RelevanceMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CaptionArtifact {
    selection: PatchSelection,
    captions: Vec<Caption>,
    flags: Vec<Flag>,
}

/// Every intermediate artifact of one item.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemTrace {
    pub relevance: Option<RelevanceMap>,
    pub selection: Option<PatchSelection>,
    /// Deduplicated captions in generation order.
    pub captions: Vec<Caption>,
    pub scored: Vec<ScoredCaption>,
    pub rerank: Option<CaptionSelection>,
    /// Captions handed to summary, QA synthesis and the prompt.
    pub kept: Vec<Caption>,
    pub summary: Option<Summary>,
    pub qa: Option<Synthesis>,
    pub prompt: Option<String>,
    pub prediction: Option<AnswerPrediction>,
    pub flags: BTreeSet<Flag>,
    pub failure: Option<(Stage, String)>,
}

type StageResult<T> = Result<T, (Stage, String)>;

fn retry<T, E>(retries: usize, retriable: impl Fn(&E) -> bool, mut op: impl FnMut() -> Result<T, E>) -> Result<T, E> {
    let mut attempt = 0;
    loop {
        match op() {
            Err(e) if attempt < retries && retriable(&e) => {
                log::warn!("retrying stage after retriable backend error");
                attempt += 1;
            }
            other => return other,
        }
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    backends: Backends,
    assets: Arc<Assets>,
    cache: Arc<StageCache>,
    hashes: StageHashes,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        backends: Backends,
        assets: Arc<Assets>,
        cache: Arc<StageCache>,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let hashes = config.stage_hashes(&assets.digests);
        Ok(Self {
            config,
            backends,
            assets,
            cache,
            hashes,
        })
    }

    /// Builds assets, backends and cache from the configuration alone.
    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let assets = Arc::new(Assets::load(&config.assets)?);
        let backends = Backends::from_config(&config, &assets)?;
        let cache = match &config.cache_dir {
            Some(dir) => StageCache::open(dir)?,
            None => StageCache::in_memory(),
        };
        Ok(Self::new(config, backends, assets, Arc::new(cache))?)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn cache(&self) -> &StageCache {
        &self.cache
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.config.format, self.config.content)
    }

    fn cached<T: Serialize + DeserializeOwned>(
        &self,
        stage: Stage,
        question_id: &str,
        subhash: &str,
        compute: impl FnOnce() -> Result<T, String>,
    ) -> StageResult<T> {
        if let Some(hit) = self.cache.get(stage, question_id, subhash) {
            return Ok(hit);
        }
        let value = compute().map_err(|m| (stage, m))?;
        if let Err(e) = self.cache.put(stage, question_id, subhash, &value) {
            log::warn!("cannot write {stage} cache entry for {question_id}: {e}");
        }
        Ok(value)
    }

    /// Runs every stage the prompt content needs for one item.
    pub fn process_item(&self, record: &EvalRecord) -> ItemTrace {
        let mut trace = ItemTrace::default();
        if let Err((stage, message)) = self.stages(record, &mut trace) {
            log::warn!("item {} failed at {stage}: {message}", record.question_id);
            trace.flags.insert(Flag::StageFailed(stage));
            trace.failure = Some((stage, message));
        }
        trace
    }

    fn stages(&self, record: &EvalRecord, t: &mut ItemTrace) -> StageResult<()> {
        let cfg = &self.config;
        let content = cfg.content;
        let qid = record.question_id.as_str();
        let seed = derive_seed(cfg.seed, qid);
        let retries = cfg.retries;

        if content.needs_captions_upstream() {
            let relevance: RelevanceArtifact = self.cached(Stage::Relevance, qid, &self.hashes.relevance, || {
                match retry(retries, BackendError::is_retriable, || {
                    self.backends.captioner.export_attention(&record.image, &record.question)
                }) {
                    Ok(attn) => Ok(RelevanceArtifact {
                        map: Some(patch_relevance(&attn, cfg.rectify).with_meta(&record.image.id, qid)),
                    }),
                    Err(BackendError::Unsupported { .. }) => Ok(RelevanceArtifact { map: None }),
                    Err(e) => Err(e.to_string()),
                }
            })?;
            t.relevance = relevance.map;

            let captions: CaptionArtifact = self.cached(Stage::Captions, qid, &self.hashes.captions, || {
                self.caption_stage(record, t.relevance.as_ref(), seed)
            })?;
            t.flags.extend(captions.flags);
            t.selection = Some(captions.selection);
            t.captions = captions.captions;

            if content.reranked() {
                let scored: Vec<ScoredCaption> = self.cached(Stage::Rerank, qid, &self.hashes.rerank, || {
                    t.captions
                        .iter()
                        .enumerate()
                        .map(|(i, c)| {
                            retry(
                                retries,
                                |e: &RerankError| matches!(e, RerankError::Backend(b) if b.is_retriable()),
                                || score_pair(&record.question, c, i, self.backends.reranker.as_ref()),
                            )
                        })
                        .collect::<Result<_, _>>()
                        .map_err(|e| e.to_string())
                })?;
                let selection = select_top_captions(&scored, cfg.rerank_keep).map_err(|e| (Stage::Rerank, e.to_string()))?;
                if selection.empty_input {
                    t.flags.insert(Flag::EmptyRerankSelection);
                }
                t.kept = selection.ordered.iter().map(|&i| t.captions[i].clone()).collect();
                t.scored = scored;
                t.rerank = Some(selection);
            } else {
                t.kept = t.captions.iter().take(cfg.rerank_keep).cloned().collect();
            }

            if content.has_summary() {
                let summarizer = Summarizer {
                    template: self.assets.prompt.summary_template.clone(),
                    slack: LENGTH_SLACK,
                    retries,
                };
                let summary: Summary = self.cached(Stage::Summary, qid, &self.hashes.summary, || {
                    summarizer
                        .summarize(&t.kept, cfg.summary_length(), self.backends.summarizer.as_ref(), derive_seed(seed, "summary"))
                        .map_err(|e| e.to_string())
                })?;
                if summary.degraded {
                    t.flags.insert(Flag::SummaryDegraded);
                }
                t.summary = Some(summary);
            }

            if content.has_qa() {
                let synthesis: Synthesis = self.cached(Stage::Qa, qid, &self.hashes.qa, || {
                    retry(
                        retries,
                        |e: &QaError| matches!(e, QaError::Backend(b) if b.is_retriable()),
                        || {
                            synthesize(
                                &t.kept,
                                self.backends.tagger.as_ref(),
                                &self.assets.adj_types,
                                &self.assets.templates,
                                self.backends.qa_answerer.as_ref(),
                                cfg.qa_cap,
                            )
                        },
                    )
                    .map_err(|e| e.to_string())
                })?;
                if synthesis.degraded {
                    t.flags.insert(Flag::QaFilterDegraded);
                }
                t.qa = Some(synthesis);
            }
        }

        let bundle = PromptBundle {
            instruction: self.assets.prompt.instruction.clone(),
            captions: if content.has_captions() {
                t.kept.iter().map(|c| c.text.clone()).collect()
            } else {
                Vec::new()
            },
            summary: t.summary.as_ref().map(|s| s.text.clone()),
            qa_pairs: t.qa.as_ref().map(|s| s.pairs.clone()).unwrap_or_default(),
            question: record.question.clone(),
        };
        let prompt = build_prompt_with(&self.assets.prompt.labels, &bundle, cfg.format, content)
            .map_err(|e| (Stage::Prompt, e.to_string()))?;
        let answer_key = sha256_hex(format!("{}|{}", self.hashes.answer, sha256_hex(&prompt)));
        let prediction: AnswerPrediction = self.cached(Stage::Answer, qid, &answer_key, || {
            retry(
                retries,
                |e: &AnswerError| matches!(e, AnswerError::Backend(b) if b.is_retriable()),
                || answer(&prompt, self.backends.answerer.as_ref(), cfg.decode),
            )
            .map_err(|e| e.to_string())
        })?;
        if prediction.empty {
            t.flags.insert(Flag::EmptyAnswer);
        }
        t.prompt = Some(prompt);
        t.prediction = Some(prediction);
        Ok(())
    }

    /// One whole-image caption followed by `num_captions` captions of the
    /// sampled patches, deduplicated.
    fn caption_stage(&self, record: &EvalRecord, relevance: Option<&RelevanceMap>, seed: u64) -> Result<CaptionArtifact, String> {
        let cfg = &self.config;
        let captioner = self.backends.captioner.as_ref();
        let mut flags = Vec::new();
        let whole = PatchSelection::whole_image(derive_seed(seed, "whole"));
        let selection = match relevance {
            Some(map) => {
                let s = sample_patches(map, cfg.top_k_patches, cfg.patch_sampling, derive_seed(seed, "patches"))
                    .map_err(|e| e.to_string())?;
                if s.uniform_fallback {
                    flags.push(Flag::UniformPatchFallback);
                }
                s
            }
            None => {
                flags.push(Flag::NoAttentionExport);
                whole.clone()
            }
        };
        let generate = |sel: &PatchSelection, n: usize, label: &str| {
            retry(
                cfg.retries,
                |e: &CaptionError| matches!(e, CaptionError::Backend(b) if b.is_retriable()),
                || generate_captions(&record.image, sel, n, captioner, derive_seed(seed, label)),
            )
        };
        let mut captions = match generate(&whole, 1, "whole") {
            Ok(c) => c,
            Err(CaptionError::NoCaptions { .. }) => Vec::new(),
            Err(e) => return Err(e.to_string()),
        };
        let region = match generate(&selection, cfg.num_captions(), "region") {
            Ok(c) => c,
            Err(CaptionError::NoCaptions { .. }) if !selection.indices.is_empty() => {
                flags.push(Flag::WholeImageCaptionFallback);
                match generate(&whole, cfg.num_captions(), "region") {
                    Ok(c) => c,
                    Err(CaptionError::NoCaptions { .. }) => Vec::new(),
                    Err(e) => return Err(e.to_string()),
                }
            }
            Err(CaptionError::NoCaptions { .. }) => Vec::new(),
            Err(e) => return Err(e.to_string()),
        };
        captions.extend(region.into_iter().map(|mut c| {
            c.gen_index += 1;
            c
        }));
        let captions = dedup_captions(captions);
        if captions.is_empty() {
            return Err(format!("captioner `{}` produced no usable captions", captioner.id()));
        }
        Ok(CaptionArtifact {
            selection,
            captions,
            flags,
        })
    }

    /// The scored record of one item.
    pub fn evaluate_item(&self, record: &EvalRecord) -> (EvalRecord, ItemTrace) {
        let trace = self.process_item(record);
        let mut out = record.stub();
        out.flags = trace.flags.clone();
        out.prompt = trace.prompt.clone();
        out.error = trace.failure.as_ref().map(|(_, m)| m.clone());
        if let Some(p) = &trace.prediction {
            out.score = vqa_soft_accuracy(&p.normalized, &out.gt_answers);
            out.prediction = Some(p.clone());
        }
        (out, trace)
    }

    /// Scores `items` on a bounded worker pool. Output order follows input
    /// order. In strict mode the first failed item aborts the run.
    pub fn run_items(&self, items: &[EvalRecord]) -> Result<Vec<EvalRecord>, PipelineError> {
        let workers = self
            .config
            .workers
            .min(self.backends.max_concurrency().unwrap_or(usize::MAX))
            .min(items.len())
            .max(1);
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let slots: Mutex<Vec<Option<EvalRecord>>> = Mutex::new(vec![None; items.len()]);
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| {
                    while !abort.load(Ordering::SeqCst) {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(item) = items.get(i) else { break };
                        let (record, _) = self.evaluate_item(item);
                        if self.config.strict && record.failed() {
                            abort.store(true, Ordering::SeqCst);
                        }
                        slots.lock().expect("result lock")[i] = Some(record);
                    }
                });
            }
        });
        let slots = slots.into_inner().expect("result lock");
        if self.config.strict {
            if let Some(r) = slots.iter().flatten().find(|r| r.failed()) {
                let stage = r
                    .flags
                    .iter()
                    .find_map(|f| match f {
                        Flag::StageFailed(s) => Some(*s),
                        _ => None,
                    })
                    .expect("failed record has a stage flag");
                return Err(PipelineError::Item {
                    question_id: r.question_id.clone(),
                    stage,
                    message: r.error.clone().unwrap_or_default(),
                });
            }
        }
        Ok(slots.into_iter().map(|r| r.expect("every item processed")).collect())
    }

    /// Scores `items` and aggregates them.
    pub fn evaluate(&self, items: &[EvalRecord]) -> Result<RunOutput, PipelineError> {
        let records = self.run_items(items)?;
        let table = aggregate(
            &records,
            &self.config.config_id(),
            &self.label(),
            self.config.dataset,
            self.config.split(),
        )?;
        Ok(RunOutput { table, records })
    }

    /// Loads the configured dataset, then scores and aggregates it.
    pub fn run(&self) -> Result<RunOutput, PipelineError> {
        self.evaluate(&load_items(&self.config)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub table: ResultsTable,
    pub records: Vec<EvalRecord>,
}

/// Dataset items named by `config`, limited to `max_items`, with image
/// paths resolved against `image_dir`.
pub fn load_items(config: &PipelineConfig) -> Result<Vec<EvalRecord>, PipelineError> {
    let missing = |what: &str| ConfigError::Invalid(format!("paths.{what} is required for {}", config.dataset));
    let annotations = config.paths.annotations.as_deref().ok_or_else(|| missing("annotations"))?;
    let mut items = match config.dataset {
        Dataset::OkVqa => {
            let questions = config.paths.questions.as_deref().ok_or_else(|| missing("questions"))?;
            dataset::load_okvqa(questions, annotations)?
        }
        Dataset::AOkVqa => dataset::load_aokvqa(annotations, config.split())?,
    };
    if let Some(n) = config.max_items {
        items.truncate(n);
    }
    if let Some(dir) = &config.paths.image_dir {
        for item in &mut items {
            item.image.path = Some(dir.join(config.dataset.image_file_name(&item.image.id)));
        }
    }
    Ok(items)
}

impl ItemTrace {
    /// Plain-text dump of every stage artifact.
    pub fn render(&self, record: &EvalRecord) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "question_id: {}", record.question_id);
        let _ = writeln!(s, "image: {}", record.image.id);
        let _ = writeln!(s, "question: {}", record.question);
        let _ = writeln!(s, "gt_answers: {}", record.gt_answers.join(" | "));
        if let Some(map) = &self.relevance {
            let top: Vec<String> = crate::relevance::rank_descending(&map.scores)
                .into_iter()
                .take(10)
                .map(|i| format!("{i}:{:.4}", map.scores[i]))
                .collect();
            let _ = writeln!(s, "\n[relevance] {} patches, top: {}", map.scores.len(), top.join(" "));
        }
        if let Some(sel) = &self.selection {
            let _ = writeln!(s, "[patches] {:?} ({:?})", sel.indices, sel.strategy);
        }
        if !self.captions.is_empty() {
            let _ = writeln!(s, "\n[captions]");
            for (i, c) in self.captions.iter().enumerate() {
                let score = self.scored.iter().find(|x| x.caption_index == i).map(|x| format!(" score={:.4}", x.score));
                let _ = writeln!(s, "  {i}: {}{}", c.text, score.unwrap_or_default());
            }
        }
        if !self.kept.is_empty() {
            let _ = writeln!(s, "\n[kept]");
            for c in &self.kept {
                let _ = writeln!(s, "  {}", c.text);
            }
        }
        if let Some(summary) = &self.summary {
            let _ = writeln!(s, "\n[summary]{}\n  {}", if summary.degraded { " (fallback)" } else { "" }, summary.text);
        }
        if let Some(qa) = &self.qa {
            let _ = writeln!(s, "\n[qa pairs]");
            for p in &qa.pairs {
                let _ = writeln!(s, "  ({}) {} -> {}", p.template_id, p.question, p.answer);
            }
        }
        if let Some(prompt) = &self.prompt {
            let _ = writeln!(s, "\n[prompt]\n{prompt}");
        }
        if let Some(p) = &self.prediction {
            let score = vqa_soft_accuracy(&p.normalized, &record.gt_answers);
            let _ = writeln!(s, "\n[answer] raw={:?} normalized={:?} score={score:.3}", p.raw, p.normalized);
        }
        if !self.flags.is_empty() {
            let flags: Vec<String> = self.flags.iter().map(Flag::to_string).collect();
            let _ = writeln!(s, "\n[flags] {}", flags.join(", "));
        }
        if let Some((stage, message)) = &self.failure {
            let _ = writeln!(s, "[failure] {stage}: {message}");
        }
        s
    }
}

/// Reads records written by an earlier run and rescores them.
pub fn rescore(path: &Path) -> Result<Vec<EvalRecord>, PipelineError> {
    let mut records = dataset::read_records(path)?;
    for r in &mut records {
        r.score = r
            .prediction
            .as_ref()
            .map_or(0.0, |p| vqa_soft_accuracy(&p.normalized, &r.gt_answers));
    }
    Ok(records)
}
