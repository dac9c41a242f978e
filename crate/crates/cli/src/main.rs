use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vqa_core::eval::ablation::{content_grid, format_grid, successful_tables, sweep_grid, sweep_series};
use vqa_core::eval::dataset::write_records;
use vqa_core::eval::{
    aggregate, emit_report, run_ablation, AblationCell, CellOutcome, Dataset, IngestError, ResultsTable, Split,
    SweepParam,
};
use vqa_core::pipeline::{load_items, rescore, Assets, Backends, ConfigError, Pipeline, PipelineConfig, PipelineError, StageCache};
use vqa_core::prompt::{PromptContent, PromptFormat};

/// Zero-shot knowledge-based VQA with caption reranking, summaries and
/// synthetic QA exemplars.
#[derive(Parser)]
#[command(name = "vqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one configuration.
    Run {
        #[command(flatten)]
        opts: ConfigOpts,
        /// Directory for results.csv, results.json and records.jsonl.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a grid of prompt contents or formats.
    Ablate {
        #[command(flatten)]
        opts: ConfigOpts,
        #[arg(long, value_enum, default_value_t = Grid::Content)]
        grid: Grid,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sweep one hyperparameter.
    Sweep {
        #[command(flatten)]
        opts: ConfigOpts,
        /// num-captions, rerank-keep or summary-length.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values; defaults to the published sweep.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Rescore and aggregate records written by `run`.
    ScoreOnly {
        #[command(flatten)]
        opts: ConfigOpts,
        /// records.jsonl from an earlier run.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print every stage artifact for one item.
    Inspect {
        question_id: String,
        #[command(flatten)]
        opts: ConfigOpts,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// The six prompt contents under the configured format.
    Content,
    /// The five prompt formats under the configured content.
    Format,
}

/// Config file plus overrides of its fields.
#[derive(Args)]
struct ConfigOpts {
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<Dataset>,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    questions: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    image_dir: Option<PathBuf>,
    #[arg(long)]
    captioner: Option<String>,
    #[arg(long)]
    reranker: Option<String>,
    #[arg(long)]
    summarizer: Option<String>,
    #[arg(long)]
    answerer: Option<String>,
    #[arg(long)]
    num_captions: Option<usize>,
    #[arg(long)]
    top_k_patches: Option<usize>,
    #[arg(long)]
    rerank_keep: Option<usize>,
    #[arg(long)]
    summary_length: Option<usize>,
    #[arg(long)]
    format: Option<PromptFormat>,
    #[arg(long)]
    content: Option<PromptContent>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "VQA_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    max_items: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Abort on the first failed item.
    #[arg(long)]
    strict: bool,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set! {
            dataset => c.dataset,
            top_k_patches => c.top_k_patches,
            rerank_keep => c.rerank_keep,
            format => c.format,
            content => c.content,
            seed => c.seed,
            workers => c.workers,
            captioner => c.backends.captioner,
            reranker => c.backends.reranker,
            summarizer => c.backends.summarizer,
            answerer => c.backends.answerer,
        }
        if let Some(v) = self.split {
            c.split = Some(v);
        }
        if let Some(v) = self.summary_length {
            c.summary_length = Some(v);
        }
        if let Some(v) = self.num_captions {
            c.num_captions = Some(v);
        }
        for (src, dst) in [
            (&self.questions, &mut c.paths.questions),
            (&self.annotations, &mut c.paths.annotations),
            (&self.image_dir, &mut c.paths.image_dir),
            (&self.cache_dir, &mut c.cache_dir),
        ] {
            if let Some(v) = src {
                *dst = Some(v.clone());
            }
        }
        if let Some(v) = self.max_items {
            c.max_items = Some(v);
        }
        c.strict |= self.strict;
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return e.exit_code() as u8;
        }
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<IngestError>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_table(t: &ResultsTable) {
    println!(
        "{:<40} {:>7} {:>5} items={:<5} acc={:.1}",
        t.label,
        t.dataset,
        t.split,
        t.n_items,
        t.display_accuracy()
    );
}

fn print_report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

/// Shared state for multi-cell commands.
fn ablation_context(config: &PipelineConfig) -> Result<(Arc<Assets>, Backends, Arc<StageCache>), PipelineError> {
    let assets = Arc::new(Assets::load(&config.assets)?);
    let backends = Backends::from_config(config, &assets)?;
    let cache = match &config.cache_dir {
        Some(dir) => StageCache::open(dir)?,
        None => StageCache::in_memory(),
    };
    Ok((assets, backends, Arc::new(cache)))
}

fn run_grid(config: &PipelineConfig, grid: &[AblationCell]) -> Result<Vec<CellOutcome>> {
    let items = load_items(config)?;
    let (assets, backends, cache) = ablation_context(config)?;
    let outcomes = run_ablation(config, grid, &items, &backends, assets, cache)?;
    for o in &outcomes {
        match &o.result {
            Ok(r) => print_table(&r.table),
            Err(e) => println!("{:<40} FAILED: {e}", o.cell.label()),
        }
    }
    Ok(outcomes)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { opts, out } => {
            let config = opts.resolve()?;
            let output = Pipeline::from_config(config)?.run()?;
            print_table(&output.table);
            let mut written = emit_report(std::slice::from_ref(&output.table), &[], &out)?;
            let records = out.join("records.jsonl");
            write_records(&records, &output.records).with_context(|| format!("writing {}", records.display()))?;
            written.push(records);
            print_report(&written);
        }
        Command::Ablate { opts, grid, out } => {
            let config = opts.resolve()?;
            let cells = match grid {
                Grid::Content => content_grid(config.format),
                Grid::Format => format_grid(config.content),
            };
            let outcomes = run_grid(&config, &cells)?;
            let tables = successful_tables(&outcomes);
            print_report(&emit_report(&tables, &[], &out)?);
            if tables.len() < outcomes.len() {
                return Err(anyhow!("{} of {} cells failed", outcomes.len() - tables.len(), outcomes.len()));
            }
        }
        Command::Sweep {
            opts,
            param,
            values,
            out,
        } => {
            let config = opts.resolve()?;
            let values = if values.is_empty() { param.default_values() } else { values };
            let base = AblationCell::new(config.format, config.content);
            let outcomes = run_grid(&config, &sweep_grid(base, param, &values))?;
            let series = sweep_series(param, &outcomes);
            print_report(&emit_report(&successful_tables(&outcomes), &[series], &out)?);
        }
        Command::ScoreOnly { opts, records, out } => {
            let config = opts.resolve()?;
            let records = rescore(&records)?;
            let table = aggregate(
                &records,
                &config.config_id(),
                "score-only",
                config.dataset,
                config.split(),
            )?;
            print_table(&table);
            print_report(&emit_report(&[table], &[], &out)?);
        }
        Command::Inspect { question_id, opts } => {
            let config = opts.resolve()?;
            let items = load_items(&PipelineConfig {
                max_items: None,
                ..config.clone()
            })?;
            let item = items
                .iter()
                .find(|r| r.question_id == question_id)
                .ok_or_else(|| anyhow!("question {question_id} is not in the dataset"))?;
            let pipeline = Pipeline::from_config(config)?;
            print!("{}", pipeline.process_item(item).render(item));
        }
    }
    Ok(())
}
