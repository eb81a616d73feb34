use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::EvalError;
use crate::diff_engine::Tensor;
use crate::feature_store::ClipRecord;
use crate::model_zoo::Model;

/// Eval-mode penultimate activations, one row per record.
pub fn collect_embeddings(model: &Model, records: &[&ClipRecord], chunk: usize) -> Result<Tensor, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(model.predict(records, chunk)?.penultimate)
}

/// CSV with header `clip_id,label,e0,…`.
pub fn write_embeddings_csv<W: Write>(w: W, records: &[&ClipRecord], embeddings: &Tensor) -> Result<(), EvalError> {
    if embeddings.rows() != records.len() {
        return Err(EvalError::LengthMismatch { preds: embeddings.rows(), truth: records.len() });
    }
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["clip_id".to_string(), "label".to_string()];
    header.extend((0..embeddings.cols()).map(|i| format!("e{i}")));
    csv.write_record(&header)?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![r.clip_id.to_string(), r.label.name().to_string()];
        row.extend(embeddings.row(i).iter().map(|v| v.to_string()));
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn export_embeddings(
    model: &Model,
    records: &[&ClipRecord],
    path: impl AsRef<Path>,
    chunk: usize,
) -> Result<(), EvalError> {
    let e = collect_embeddings(model, records, chunk)?;
    write_embeddings_csv(File::create(path)?, records, &e)
}
