//! CSV and JSON result files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::eval::ablation::SweepSeries;
use crate::eval::ResultsTable;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no results to report")]
    Empty,
    #[error("cannot write report to {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write report: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Serialize)]
struct TableRow<'a> {
    config_id: &'a str,
    label: &'a str,
    dataset: &'a str,
    split: &'a str,
    n_items: usize,
    accuracy: f64,
    mean_accuracy: f64,
}

#[derive(Serialize)]
struct Report<'a> {
    tables: &'a [ResultsTable],
    sweeps: &'a [SweepSeries],
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `results.csv`, `results.json` and one `sweep_<param>.csv` per
/// series into `out_dir`. Returns the written paths.
pub fn emit_report(tables: &[ResultsTable], sweeps: &[SweepSeries], out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if tables.is_empty() {
        return Err(ReportError::Empty);
    }
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();

    let csv_path = out_dir.join("results.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for t in tables {
        w.serialize(TableRow {
            config_id: &t.config_id,
            label: &t.label,
            dataset: t.dataset.id(),
            split: t.split.id(),
            n_items: t.n_items,
            accuracy: t.display_accuracy(),
            mean_accuracy: t.mean_accuracy,
        })?;
    }
    w.flush().map_err(io(&csv_path))?;
    written.push(csv_path);

    let json_path = out_dir.join("results.json");
    let json = serde_json::to_string_pretty(&Report { tables, sweeps }).expect("report serializes");
    fs::write(&json_path, json + "\n").map_err(io(&json_path))?;
    written.push(json_path);

    for series in sweeps {
        let path = out_dir.join(format!("sweep_{}.csv", series.param));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["x", "dataset", "accuracy"])?;
        for p in &series.points {
            w.write_record([p.x.to_string(), p.dataset.id().to_string(), p.accuracy.to_string()])?;
        }
        w.flush().map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}
