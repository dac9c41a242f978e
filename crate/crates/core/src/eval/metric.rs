//! Soft accuracy and result aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::normalize_answer;
use crate::eval::dataset::{Dataset, EvalRecord, Split};

/// Annotator matches needed for full credit.
pub const FULL_CREDIT_MATCHES: usize = 3;

/// `min(matches / 3, 1)`, where `matches` counts ground-truth answers whose
/// normalized form equals `prediction`. An empty prediction scores 0.
pub fn vqa_soft_accuracy(prediction: &str, gt_answers: &[String]) -> f64 {
    if prediction.is_empty() {
        return 0.0;
    }
    let matches = gt_answers
        .iter()
        .filter(|a| normalize_answer(a) == prediction)
        .count();
    matches.min(FULL_CREDIT_MATCHES) as f64 / FULL_CREDIT_MATCHES as f64
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregateError {
    #[error("no records to aggregate")]
    Empty,
    #[error("record {0} has not been scored")]
    Unscored(String),
    #[error("record {question_id} has score {score}, not a multiple of 1/3 in [0, 1]")]
    InvalidScore { question_id: String, score: f64 },
}

/// Mean accuracy of one configuration on one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub config_id: String,
    /// Free-form description, e.g. the ablation cell.
    pub label: String,
    pub dataset: Dataset,
    pub split: Split,
    /// Percentage at full precision.
    pub mean_accuracy: f64,
    pub n_items: usize,
    /// Number of records carrying each flag.
    pub flag_counts: BTreeMap<String, usize>,
}

impl ResultsTable {
    /// Accuracy rounded to one decimal, as reported in tables.
    pub fn display_accuracy(&self) -> f64 {
        (self.mean_accuracy * 10.0).round() / 10.0
    }
}

/// Averages per-item scores. The mean is computed exactly in thirds and
/// divided once, so it does not depend on record order.
pub fn aggregate(
    records: &[EvalRecord],
    config_id: &str,
    label: &str,
    dataset: Dataset,
    split: Split,
) -> Result<ResultsTable, AggregateError> {
    if records.is_empty() {
        return Err(AggregateError::Empty);
    }
    let mut thirds: u64 = 0;
    let mut flag_counts = BTreeMap::new();
    for r in records {
        if !r.is_scored() {
            return Err(AggregateError::Unscored(r.question_id.clone()));
        }
        let units = r.score * 3.0;
        let rounded = units.round();
        if !(0.0..=3.0).contains(&rounded) || (units - rounded).abs() > 1e-9 {
            return Err(AggregateError::InvalidScore {
                question_id: r.question_id.clone(),
                score: r.score,
            });
        }
        thirds += rounded as u64;
        for f in &r.flags {
            *flag_counts.entry(f.to_string()).or_default() += 1;
        }
    }
    let n = records.len();
    Ok(ResultsTable {
        config_id: config_id.to_string(),
        label: label.to_string(),
        dataset,
        split,
        mean_accuracy: (100 * thirds) as f64 / (3 * n) as f64,
        n_items: n,
        flag_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::{AnswerPrediction, DecodeParams};
    use crate::caption::ImageRef;

    fn gts(answers: &[&str]) -> Vec<String> {
        answers.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn soft_accuracy_levels() {
        let mut gt = gts(&["cat"; 10]);
        for (matches, expected) in [(0, 0.0), (1, 1.0 / 3.0), (2, 2.0 / 3.0), (3, 1.0), (7, 1.0)] {
            for (i, a) in gt.iter_mut().enumerate() {
                *a = if i < matches { "Dog".into() } else { "cat".into() };
            }
            assert_eq!(vqa_soft_accuracy("dog", &gt), expected, "matches={matches}");
        }
    }

    #[test]
    fn empty_prediction_never_scores() {
        assert_eq!(vqa_soft_accuracy("", &gts(&["", "", "", "the"])), 0.0);
    }

    fn record(id: &str, score: f64) -> EvalRecord {
        let mut r = EvalRecord::new(id.into(), ImageRef::new("i"), "q?".into(), gts(&["a"]));
        r.score = score;
        r.prediction = Some(AnswerPrediction {
            raw: String::new(),
            normalized: String::new(),
            prompt_hash: String::new(),
            backend_id: "x".into(),
            decode_params: DecodeParams::default(),
            empty: false,
        });
        r
    }

    fn table(records: &[EvalRecord]) -> Result<ResultsTable, AggregateError> {
        aggregate(records, "cfg", "", Dataset::OkVqa, Split::Test)
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(table(&[record("a", 1.0), record("b", 0.0)]).unwrap().mean_accuracy, 50.0);
        assert_eq!(table(&[record("a", 0.0), record("b", 0.0)]).unwrap().mean_accuracy, 0.0);
        assert_eq!(table(&[]), Err(AggregateError::Empty));
        assert!(matches!(table(&[record("a", 0.5)]), Err(AggregateError::InvalidScore { .. })));
        let unscored = EvalRecord::new("u".into(), ImageRef::new("i"), "q?".into(), gts(&["a"]));
        assert_eq!(table(&[unscored]), Err(AggregateError::Unscored("u".into())));
    }

    #[test]
    fn display_rounding() {
        let t = table(&[record("a", 1.0), record("b", 1.0 / 3.0), record("c", 0.0)]).unwrap();
        // (3 + 1 + 0) thirds over 3 items = 44.444...%
        assert_eq!(t.mean_accuracy, 400.0 / 9.0);
        assert_eq!(t.display_accuracy(), 44.4);
    }
}
