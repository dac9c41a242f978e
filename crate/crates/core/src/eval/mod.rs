//! Dataset loading, scoring, ablations and result files.

pub mod ablation;
pub mod dataset;
pub mod metric;
pub mod report;

pub use ablation::{run_ablation, AblationCell, CellOutcome, Hyperparams, SweepParam, SweepSeries};
pub use dataset::{Dataset, EvalRecord, Flag, IngestError, Split, Stage};
pub use metric::{aggregate, vqa_soft_accuracy, AggregateError, ResultsTable};
pub use report::{emit_report, ReportError};
