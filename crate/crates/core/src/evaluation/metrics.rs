use std::collections::BTreeMap;

use super::{ClassMetrics, Confusion, EvalError, EvalReport, Totals};
use crate::diff_engine::Tensor;
use crate::feature_store::{ClipRecord, Label};
use crate::model_zoo::Model;

const K: usize = Label::COUNT;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of `[n × 4]` logits.
pub fn softmax_probabilities(logits: &Tensor) -> Result<Vec<[f64; K]>, EvalError> {
    if logits.shape().len() != 2 || logits.cols() != K || !logits.all_finite() {
        return Err(EvalError::BadScores { expected: K });
    }
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut p = [0.0; K];
            for (o, &v) in p.iter_mut().zip(row) {
                *o = (v - max).exp();
            }
            let s: f64 = p.iter().sum();
            p.map(|v| v / s)
        })
        .collect())
}

pub fn confusion_matrix(preds: &[Label], truth: &[Label]) -> Result<Confusion, EvalError> {
    if preds.len() != truth.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), truth: truth.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut m = [[0u64; K]; K];
    for (p, t) in preds.iter().zip(truth) {
        m[t.index()][p.index()] += 1;
    }
    Ok(m)
}

/// Area under the ROC curve of `scores` for the `positive` samples against
/// the rest, computed from average ranks. `None` without both positives and
/// negatives.
pub fn auc_one_vs_rest(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and flags differ in length");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based ranks of the positives, ties sharing their average rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| positive[k]).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

pub fn per_class_metrics(
    confusion: &Confusion,
    scores: &[[f64; K]],
    truth: &[Label],
) -> Result<BTreeMap<Label, Option<ClassMetrics>>, EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::LengthMismatch { preds: scores.len(), truth: truth.len() });
    }
    let mut out = BTreeMap::new();
    for label in Label::ALL {
        let c = label.index();
        let positive: Vec<bool> = truth.iter().map(|&t| t == label).collect();
        let column: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let metrics = auc_one_vs_rest(&column, &positive).map(|auc| {
            let tp = confusion[c][c] as f64;
            let actual: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { acc: recall, f1, auc }
        });
        out.insert(label, metrics);
    }
    Ok(out)
}

/// Unweighted mean over the defined classes.
pub fn aggregate_totals(per_class: &BTreeMap<Label, Option<ClassMetrics>>) -> Result<Totals, EvalError> {
    let defined: Vec<ClassMetrics> = per_class.values().filter_map(|m| *m).collect();
    if defined.is_empty() {
        return Err(EvalError::NoDefinedClass);
    }
    Ok(super::mean_metrics(&defined))
}

/// Full report from class probabilities; predictions are the row argmax.
pub fn evaluate_scores(scores: &[[f64; K]], truth: &[Label]) -> Result<EvalReport, EvalError> {
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::BadScores { expected: K });
    }
    let preds: Vec<Label> = scores.iter().map(|s| Label::ALL[argmax(s)]).collect();
    let confusion = confusion_matrix(&preds, truth)?;
    let per_class = per_class_metrics(&confusion, scores, truth)?;
    let totals = aggregate_totals(&per_class)?;
    let warnings = per_class
        .iter()
        .filter(|(_, m)| m.is_none())
        .map(|(l, _)| format!("class {l} undefined on this set (needs positives and negatives); excluded from totals"))
        .collect();
    Ok(EvalReport { confusion, per_class, totals, n_samples: truth.len() as u64, warnings })
}

pub fn evaluate_logits(logits: &Tensor, truth: &[Label]) -> Result<EvalReport, EvalError> {
    evaluate_scores(&softmax_probabilities(logits)?, truth)
}

/// Eval-mode report of `model` on `records`.
pub fn evaluate_model(model: &Model, records: &[&ClipRecord], chunk: usize) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let out = model.predict(records, chunk)?;
    let truth: Vec<Label> = records.iter().map(|r| r.label).collect();
    evaluate_logits(&out.logits, &truth)
}
