use std::path::PathBuf;
use std::sync::Arc;

use vqa_core::caption::CaptionerBackend;
use vqa_core::eval::{Flag, Stage};
use vqa_core::pipeline::{load_items, Assets, Backends, Pipeline, PipelineConfig, PipelineError, StageCache};
use vqa_core::prompt::{PromptContent, PromptFormat};
use vqa_core::stub::{Counted, StubCaptioner, StubLm, StubReranker};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn config() -> PipelineConfig {
    PipelineConfig::load(&fixtures().join("stub_okvqa.toml")).unwrap()
}

struct Counters {
    captioner: Arc<Counted<StubCaptioner>>,
    reranker: Arc<Counted<StubReranker>>,
    lm: Arc<Counted<StubLm>>,
}

impl Counters {
    fn total(&self) -> usize {
        self.captioner.calls() + self.reranker.calls() + self.lm.calls()
    }
}

fn counted(assets: &Assets, captioner: StubCaptioner) -> (Backends, Counters) {
    let mut backends = Backends::stub(assets);
    let c = Counters {
        captioner: Arc::new(Counted::new(captioner)),
        reranker: Arc::new(Counted::new(StubReranker)),
        lm: Arc::new(Counted::new(StubLm::new(assets.prompt.labels.clone()))),
    };
    backends.captioner = c.captioner.clone();
    backends.reranker = c.reranker.clone();
    backends.summarizer = c.lm.clone();
    backends.answerer = c.lm.clone();
    (backends, c)
}

fn scenes(assets: &Assets) -> StubCaptioner {
    StubCaptioner::from_scenes_json(assets.scenes.as_deref().unwrap()).unwrap()
}

#[test]
fn cold_runs_are_byte_identical() {
    let cfg = config();
    let a = Pipeline::from_config(cfg.clone()).unwrap().run().unwrap();
    let b = Pipeline::from_config(cfg).unwrap().run().unwrap();
    assert_eq!(a.records.len(), 3);
    assert_eq!(
        serde_json::to_string(&a.records).unwrap(),
        serde_json::to_string(&b.records).unwrap()
    );
    assert_eq!(a.table, b.table);
    assert!(a.records.iter().all(|r| !r.failed()), "{:#?}", a.records);
}

#[test]
fn warm_cache_makes_no_backend_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let assets = Arc::new(Assets::load(&cfg.assets).unwrap());
    let items = load_items(&cfg).unwrap();

    let (backends, cold_calls) = counted(&assets, scenes(&assets));
    let cache = Arc::new(StageCache::open(dir.path()).unwrap());
    let cold = Pipeline::new(cfg.clone(), backends, assets.clone(), cache).unwrap().evaluate(&items).unwrap();
    assert!(cold_calls.total() > 0);

    let (backends, warm_calls) = counted(&assets, scenes(&assets));
    let cache = Arc::new(StageCache::open(dir.path()).unwrap());
    let warm = Pipeline::new(cfg, backends, assets, cache).unwrap().evaluate(&items).unwrap();
    assert_eq!(warm_calls.total(), 0);
    assert_eq!(
        serde_json::to_string(&cold.records).unwrap(),
        serde_json::to_string(&warm.records).unwrap()
    );
    assert_eq!(cold.table, warm.table);
}

#[test]
fn format_change_reuses_upstream_stages() {
    let cfg = config();
    let assets = Arc::new(Assets::load(&cfg.assets).unwrap());
    let items = load_items(&cfg).unwrap();
    let cache = Arc::new(StageCache::in_memory());
    let (backends, _) = counted(&assets, scenes(&assets));
    Pipeline::new(cfg.clone(), backends, assets.clone(), cache.clone()).unwrap().evaluate(&items).unwrap();

    let (backends, calls) = counted(&assets, scenes(&assets));
    let other = PipelineConfig {
        format: PromptFormat::ALL[0],
        ..cfg
    };
    Pipeline::new(other, backends, assets, cache).unwrap().evaluate(&items).unwrap();
    assert_eq!(calls.captioner.calls(), 0);
    assert_eq!(calls.reranker.calls(), 0);
    // Only the answerer sees the new prompt.
    assert_eq!(calls.lm.calls(), items.len());
}

#[test]
fn caption_failure_is_isolated() {
    let cfg = config();
    let assets = Arc::new(Assets::load(&cfg.assets).unwrap());
    let items = load_items(&cfg).unwrap();
    let (backends, _) = counted(&assets, scenes(&assets).failing_on("1002"));
    let pipeline = Pipeline::new(cfg.clone(), backends.clone(), assets.clone(), Arc::new(StageCache::in_memory())).unwrap();
    let out = pipeline.evaluate(&items).unwrap();
    let failed: Vec<_> = out.records.iter().filter(|r| r.failed()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].question_id, "10020");
    assert!(failed[0].flags.contains(&Flag::StageFailed(Stage::Captions)));
    assert_eq!(failed[0].score, 0.0);
    assert_eq!(out.table.n_items, 3);

    // Other items are unaffected by the failure.
    let clean = Pipeline::from_config(cfg.clone()).unwrap().run().unwrap();
    for (a, b) in out.records.iter().zip(&clean.records) {
        if a.question_id != "10020" {
            assert_eq!(a, b);
        }
    }

    let strict = PipelineConfig { strict: true, ..cfg };
    let pipeline = Pipeline::new(strict, backends, assets, Arc::new(StageCache::in_memory())).unwrap();
    match pipeline.evaluate(&items) {
        Err(e @ PipelineError::Item { .. }) => assert_eq!(e.exit_code(), 4),
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn missing_attention_export_falls_back_to_whole_image() {
    let cfg = config();
    let assets = Arc::new(Assets::load(&cfg.assets).unwrap());
    let items = load_items(&cfg).unwrap();
    let (backends, calls) = counted(&assets, scenes(&assets).without_attention());
    assert!(!calls.captioner.capabilities().supports_attention_export);
    let out = Pipeline::new(cfg, backends, assets, Arc::new(StageCache::in_memory()))
        .unwrap()
        .evaluate(&items)
        .unwrap();
    assert!(out.records.iter().all(|r| r.flags.contains(&Flag::NoAttentionExport) && !r.failed()));
}

#[test]
fn worker_pool_matches_sequential() {
    let cfg = config();
    let seq = Pipeline::from_config(cfg.clone()).unwrap().run().unwrap();
    let par = Pipeline::from_config(PipelineConfig { workers: 4, ..cfg }).unwrap().run().unwrap();
    assert_eq!(seq, par);
}

#[test]
fn dropping_an_item_leaves_others_unchanged() {
    let cfg = config();
    let pipeline = Pipeline::from_config(cfg.clone()).unwrap();
    let items = load_items(&cfg).unwrap();
    let all = pipeline.run_items(&items).unwrap();
    let fresh = Pipeline::from_config(cfg).unwrap();
    let some = fresh.run_items(&items[1..]).unwrap();
    assert_eq!(&all[1..], &some[..]);
}

#[test]
fn instruction_only_content_skips_caption_stages() {
    let cfg = PipelineConfig {
        content: PromptContent::Instruction,
        ..config()
    };
    let assets = Arc::new(Assets::load(&cfg.assets).unwrap());
    let items = load_items(&cfg).unwrap();
    let (backends, calls) = counted(&assets, scenes(&assets));
    let out = Pipeline::new(cfg, backends, assets, Arc::new(StageCache::in_memory()))
        .unwrap()
        .evaluate(&items)
        .unwrap();
    assert_eq!(calls.captioner.calls() + calls.reranker.calls(), 0);
    for r in &out.records {
        let prompt = r.prompt.as_deref().unwrap();
        assert!(!prompt.contains("Caption:") && !prompt.contains("Contexts:"), "{prompt}");
    }
}

#[test]
fn aokvqa_fixture_runs() {
    let cfg = PipelineConfig::from_toml(
        "dataset = \"aokvqa\"\n[paths]\nannotations = \"aokvqa_val.json\"\n[assets]\nscenes = \"scenes.json\"\n",
    )
    .map(|mut c| {
        c.resolve_paths(&fixtures());
        c
    })
    .unwrap();
    let out = Pipeline::from_config(cfg).unwrap().run().unwrap();
    assert_eq!(out.records.len(), 5);
    assert_eq!(out.table.split.id(), "val");
}
