//! Classification metrics, fold reports and embedding export.
//!
//! Per-class "accuracy" is recall: `M[c][c] / Σ_j M[c][j]`. F1 uses the same
//! recall with precision `M[c][c] / Σ_i M[i][c]`. AUC is one-vs-rest over the
//! softmax probability of the class, from the Mann–Whitney rank statistic
//! with ties counted as half. A class with no positives or no negatives in
//! the evaluated set is undefined and left out of the totals.

mod embeddings;
mod metrics;
mod render;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::feature_store::Label;
use crate::model_zoo::ModelError;

pub use embeddings::{collect_embeddings, export_embeddings, write_embeddings_csv};
pub use metrics::{
    aggregate_totals, argmax, auc_one_vs_rest, confusion_matrix, evaluate_logits, evaluate_model, evaluate_scores,
    per_class_metrics, softmax_probabilities,
};
pub use render::{percent, render_table};

/// `confusion[t][p]` counts samples of true class `t` predicted as `p`.
pub type Confusion = [[u64; Label::COUNT]; Label::COUNT];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
}

pub type Totals = ClassMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    /// `None` marks a class that was undefined on this evaluation set.
    pub per_class: BTreeMap<Label, Option<ClassMetrics>>,
    pub totals: Totals,
    pub n_samples: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Fold average: confusions and sample counts are summed, each class
    /// metric is averaged over the folds where it was defined, and totals are
    /// the mean of the fold totals.
    pub fn mean(reports: &[EvalReport]) -> Result<EvalReport, EvalError> {
        if reports.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut confusion = [[0u64; Label::COUNT]; Label::COUNT];
        for r in reports {
            for (row, src) in confusion.iter_mut().zip(&r.confusion) {
                for (c, s) in row.iter_mut().zip(src) {
                    *c += s;
                }
            }
        }
        let per_class = Label::ALL
            .iter()
            .map(|&l| {
                let defined: Vec<ClassMetrics> = reports.iter().filter_map(|r| r.per_class.get(&l).copied().flatten()).collect();
                (l, (!defined.is_empty()).then(|| mean_metrics(&defined)))
            })
            .collect();
        let totals = mean_metrics(&reports.iter().map(|r| r.totals).collect::<Vec<_>>());
        let mut warnings: Vec<String> = reports.iter().flat_map(|r| r.warnings.iter().cloned()).collect();
        warnings.dedup();
        Ok(EvalReport {
            confusion,
            per_class,
            totals,
            n_samples: reports.iter().map(|r| r.n_samples).sum(),
            warnings,
        })
    }
}

fn mean_metrics(items: &[ClassMetrics]) -> ClassMetrics {
    let n = items.len() as f64;
    ClassMetrics {
        acc: items.iter().map(|m| m.acc).sum::<f64>() / n,
        f1: items.iter().map(|m| m.f1).sum::<f64>() / n,
        auc: items.iter().map(|m| m.auc).sum::<f64>() / n,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{preds} predictions for {truth} labels")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("no class is defined on this evaluation set")]
    NoDefinedClass,
    #[error("score rows must have {expected} finite columns")]
    BadScores { expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
