//! Grids of prompt formats, contents and hyperparameters.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{Dataset, EvalRecord, ResultsTable};
use crate::pipeline::{Assets, Backends, Pipeline, PipelineConfig, RunOutput, StageCache};
use crate::prompt::{PromptContent, PromptFormat};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hyperparams {
    pub num_captions: Option<usize>,
    pub rerank_keep: Option<usize>,
    pub summary_length: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub format: PromptFormat,
    pub content: PromptContent,
    #[serde(default)]
    pub hyper: Hyperparams,
}

impl AblationCell {
    pub fn new(format: PromptFormat, content: PromptContent) -> Self {
        Self {
            format,
            content,
            hyper: Hyperparams::default(),
        }
    }

    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        c.format = self.format;
        c.content = self.content;
        if let Some(n) = self.hyper.num_captions {
            c.num_captions = Some(n);
        }
        if let Some(k) = self.hyper.rerank_keep {
            c.rerank_keep = k;
        }
        if let Some(l) = self.hyper.summary_length {
            c.summary_length = Some(l);
        }
        c
    }

    pub fn label(&self) -> String {
        let mut s = format!("{} {}", self.format, self.content);
        let h = &self.hyper;
        for (name, v) in [
            ("num_captions", h.num_captions),
            ("rerank_keep", h.rerank_keep),
            ("summary_length", h.summary_length),
        ] {
            if let Some(v) = v {
                s.push_str(&format!(" {name}={v}"));
            }
        }
        s
    }
}

/// The six prompt contents under a fixed format.
pub fn content_grid(format: PromptFormat) -> Vec<AblationCell> {
    PromptContent::ALL.into_iter().map(|c| AblationCell::new(format, c)).collect()
}

/// The five prompt formats under a fixed content.
pub fn format_grid(content: PromptContent) -> Vec<AblationCell> {
    PromptFormat::ALL.into_iter().map(|f| AblationCell::new(f, content)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    NumCaptions,
    RerankKeep,
    SummaryLength,
}

impl SweepParam {
    pub fn id(self) -> &'static str {
        match self {
            SweepParam::NumCaptions => "num_captions",
            SweepParam::RerankKeep => "rerank_keep",
            SweepParam::SummaryLength => "summary_length",
        }
    }

    /// Values swept in the published plots.
    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepParam::NumCaptions | SweepParam::RerankKeep => vec![5, 10, 20, 30],
            SweepParam::SummaryLength => vec![20, 40, 60, 80, 100, 120, 140],
        }
    }

    fn set(self, hyper: &mut Hyperparams, value: usize) {
        match self {
            SweepParam::NumCaptions => hyper.num_captions = Some(value),
            SweepParam::RerankKeep => hyper.rerank_keep = Some(value),
            SweepParam::SummaryLength => hyper.summary_length = Some(value),
        }
    }

    fn get(self, hyper: &Hyperparams) -> Option<usize> {
        match self {
            SweepParam::NumCaptions => hyper.num_captions,
            SweepParam::RerankKeep => hyper.rerank_keep,
            SweepParam::SummaryLength => hyper.summary_length,
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "num_captions" => Ok(SweepParam::NumCaptions),
            "rerank_keep" => Ok(SweepParam::RerankKeep),
            "summary_length" => Ok(SweepParam::SummaryLength),
            _ => Err(format!("unknown sweep parameter `{s}`")),
        }
    }
}

/// One cell per value, all other settings from `base`.
pub fn sweep_grid(base: AblationCell, param: SweepParam, values: &[usize]) -> Vec<AblationCell> {
    values
        .iter()
        .map(|&v| {
            let mut cell = base;
            param.set(&mut cell.hyper, v);
            cell
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: AblationCell,
    pub result: Result<RunOutput, String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AblationError {
    #[error("ablation grid is empty")]
    EmptyGrid,
    #[error("no items to evaluate")]
    NoItems,
}

/// Evaluates every cell on `items`. Cells share backends and the stage
/// cache, so stages a cell does not change are computed once. A failing
/// cell is reported in its outcome and does not stop the others.
pub fn run_ablation(
    base: &PipelineConfig,
    grid: &[AblationCell],
    items: &[EvalRecord],
    backends: &Backends,
    assets: Arc<Assets>,
    cache: Arc<StageCache>,
) -> Result<Vec<CellOutcome>, AblationError> {
    if grid.is_empty() {
        return Err(AblationError::EmptyGrid);
    }
    if items.is_empty() {
        return Err(AblationError::NoItems);
    }
    Ok(grid
        .iter()
        .map(|cell| {
            let result = Pipeline::new(cell.apply(base), backends.clone(), assets.clone(), cache.clone())
                .map_err(|e| e.to_string())
                .and_then(|p| p.evaluate(items).map_err(|e| e.to_string()))
                .map(|mut out| {
                    out.table.label = cell.label();
                    out
                });
            if let Err(e) = &result {
                log::error!("ablation cell `{}` failed: {e}", cell.label());
            }
            CellOutcome { cell: *cell, result }
        })
        .collect())
}

pub fn successful_tables(outcomes: &[CellOutcome]) -> Vec<ResultsTable> {
    outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok().map(|r| r.table.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: usize,
    pub dataset: Dataset,
    /// Mean accuracy in percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSeries {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
}

/// Plot series from the successful cells of a sweep.
pub fn sweep_series(param: SweepParam, outcomes: &[CellOutcome]) -> SweepSeries {
    let points = outcomes
        .iter()
        .filter_map(|o| {
            let x = param.get(&o.cell.hyper)?;
            let table = &o.result.as_ref().ok()?.table;
            Some(SweepPoint {
                x,
                dataset: table.dataset,
                accuracy: table.mean_accuracy,
            })
        })
        .collect();
    SweepSeries { param, points }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        assert_eq!(content_grid(PromptFormat::default()).len(), 6);
        assert_eq!(format_grid(PromptContent::default()).len(), 5);
        let base = AblationCell::new(PromptFormat::default(), PromptContent::default());
        let sweep = sweep_grid(base, SweepParam::NumCaptions, &[5, 10, 20, 30]);
        assert_eq!(sweep.len(), 4);
        assert_eq!(sweep[2].hyper.num_captions, Some(20));
        assert!(sweep[2].label().ends_with("num_captions=20"));
    }

    #[test]
    fn cells_override_config() {
        let base = PipelineConfig::default();
        let mut cell = AblationCell::new(PromptFormat::ALL[0], PromptContent::Instruction);
        cell.hyper.summary_length = Some(60);
        let c = cell.apply(&base);
        assert_eq!(c.format, PromptFormat::ALL[0]);
        assert_eq!(c.content, PromptContent::Instruction);
        assert_eq!(c.summary_length(), 60);
        assert_eq!(c.seed, base.seed);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let assets = Arc::new(Assets::default());
        let backends = Backends::stub(&assets);
        let r = run_ablation(&PipelineConfig::default(), &[], &[], &backends, assets, Arc::new(StageCache::in_memory()));
        assert_eq!(r, Err(AblationError::EmptyGrid));
    }
}
