use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{adamw_step, clip_grad_norm, EarlyStopper, OptimizerState, TrainConfig, TrainError};
use crate::diff_engine::{Mode, Tensor};
use crate::evaluation::evaluate_logits;
use crate::feature_store::{ClipRecord, Label};
use crate::model_zoo::{Batch, Model};
use crate::seed::mix_seed;

const VAL_STREAM: u64 = 0x7661_6c69_6461_7465;
const DROPOUT_STREAM: u64 = 0x6472_6f70_6f75_7421;
const EVAL_CHUNK: usize = 256;

/// What early stopping watched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Macro-F1 on the validation carve-out.
    MacroF1,
    /// Negated validation loss, used when the carve-out misses a class.
    ValLoss,
    /// No validation data: every epoch runs and the final weights are kept.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    /// Epoch whose parameters the model holds after training.
    pub best_epoch: usize,
    pub best_val_metric: Option<f64>,
    pub monitor: Monitor,
    pub n_train: usize,
    pub n_val: usize,
    pub warnings: Vec<String>,
    /// SHA-256 over the sorted ids of every record used in a gradient step.
    pub seen_ids_digest: String,
    #[serde(skip)]
    pub seen_ids: BTreeSet<u64>,
    /// Checkpoint path of the restored parameters, when one was written.
    pub checkpoint: Option<String>,
}

impl RunRecord {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch records serialise") + "\n")
            .collect()
    }
}

/// Inverse-frequency weights `N / (C·n_c)` over the classes present; absent
/// classes get weight zero.
pub fn class_weights(records: &[&ClipRecord]) -> Vec<f64> {
    let mut counts = [0usize; Label::COUNT];
    for r in records {
        counts[r.label.index()] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;
    let n = records.len() as f64;
    counts.iter().map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) }).collect()
}

fn digest_ids(ids: &BTreeSet<u64>) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Stratified hold-out: from each class, `round(fraction · count)` records.
pub(super) fn carve_validation<'d>(
    records: &[&'d ClipRecord],
    fraction: f64,
    seed: u64,
) -> (Vec<&'d ClipRecord>, Vec<&'d ClipRecord>) {
    if fraction == 0.0 {
        return (records.to_vec(), Vec::new());
    }
    let mut by_class: [Vec<usize>; Label::COUNT] = Default::default();
    for (i, r) in records.iter().enumerate() {
        by_class[r.label.index()].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, VAL_STREAM));
    let mut held_out = vec![false; records.len()];
    for mut group in by_class {
        group.shuffle(&mut rng);
        let n_val = ((group.len() as f64 * fraction).round() as usize).min(group.len().saturating_sub(1));
        for &i in &group[..n_val] {
            held_out[i] = true;
        }
    }
    let (val, fit): (Vec<_>, Vec<_>) = records.iter().zip(&held_out).partition(|(_, &h)| h);
    (fit.into_iter().map(|(r, _)| *r).collect(), val.into_iter().map(|(r, _)| *r).collect())
}

fn mean_cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

pub fn train_fold(model: &mut Model, train: &[&ClipRecord], cfg: &TrainConfig) -> Result<RunRecord, TrainError> {
    train_fold_with(model, train, cfg, &mut |_| {})
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// validation epoch. `on_epoch` sees every epoch record as it completes.
pub fn train_fold_with(
    model: &mut Model,
    train: &[&ClipRecord],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let (fit, val) = carve_validation(train, cfg.val_fraction, cfg.seed);
    let mut warnings = Vec::new();
    let fit_classes: BTreeSet<Label> = fit.iter().map(|r| r.label).collect();
    let val_classes: BTreeSet<Label> = val.iter().map(|r| r.label).collect();
    let monitor = if val.is_empty() {
        if cfg.val_fraction > 0.0 {
            warnings.push("validation carve-out is empty; early stopping disabled".to_string());
        }
        Monitor::None
    } else if val_classes != fit_classes || val_classes.len() < 2 {
        warnings.push(format!(
            "validation carve-out covers classes {val_classes:?} of {fit_classes:?}; early stopping on validation loss"
        ));
        Monitor::ValLoss
    } else {
        Monitor::MacroF1
    };
    for w in &warnings {
        log::warn!("{w}");
    }

    let weights = cfg.class_weighting.then(|| class_weights(&fit));
    let val_batch = (!val.is_empty()).then(|| val.iter().map(|r| r.label.index()).collect::<Vec<_>>());
    let val_truth: Vec<Label> = val.iter().map(|r| r.label).collect();

    let mut state = OptimizerState::new(model.params());
    let mut stopper = EarlyStopper::new(if monitor == Monitor::None { None } else { cfg.early_stop_patience });
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut seen = BTreeSet::new();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_records(chunk.iter().map(|&i| fit[i]))?;
            seen.extend(batch.clip_ids.iter().copied());
            step += 1;
            let (loss, mut grads) = model.loss_and_grads(
                &batch,
                Mode::Train,
                mix_seed(cfg.seed ^ DROPOUT_STREAM, step),
                weights.as_deref(),
            )?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { what: "training loss".into(), epoch });
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            adamw_step(model.params_mut(), &grads, &mut state, cfg).map_err(|e| match e {
                TrainError::NonFinite { what, .. } => TrainError::NonFinite { what, epoch },
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / fit.len() as f64;

        let (val_metric, val_loss) = match &val_batch {
            Some(labels) => {
                let logits = model.predict(&val, EVAL_CHUNK)?.logits;
                let vl = mean_cross_entropy(&logits, labels);
                let f1 = match monitor {
                    Monitor::MacroF1 => Some(evaluate_logits(&logits, &val_truth)?.totals.f1),
                    _ => None,
                };
                (f1, Some(vl))
            }
            None => (None, None),
        };
        if let Some(vl) = val_loss {
            if !vl.is_finite() {
                return Err(TrainError::NonFinite { what: "validation loss".into(), epoch });
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_metric,
            val_loss,
            lr: cfg.lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}, val metric {val_metric:?}, val loss {val_loss:?}"
        );
        on_epoch(&record);
        epochs.push(record);

        let watched = match monitor {
            Monitor::MacroF1 => val_metric,
            Monitor::ValLoss => val_loss.map(|l| -l),
            Monitor::None => None,
        };
        if let Some(value) = watched {
            let decision = stopper.observe(epoch, value);
            if decision.improved {
                best_params = Some(model.params().to_vec());
            }
            if decision.stop {
                break;
            }
        }
    }

    let stopped_epoch = epochs.len();
    let best_epoch = stopper.best_epoch().unwrap_or(stopped_epoch);
    if let Some(p) = best_params {
        model.set_params(p)?;
    }
    let best_val_metric = match monitor {
        Monitor::MacroF1 => stopper.best_value(),
        Monitor::ValLoss => stopper.best_value().map(|v| -v),
        Monitor::None => None,
    };
    Ok(RunRecord {
        epochs,
        stopped_epoch,
        best_epoch,
        best_val_metric,
        monitor,
        n_train: fit.len(),
        n_val: val.len(),
        warnings,
        seen_ids_digest: digest_ids(&seen),
        seen_ids: seen,
        checkpoint: None,
    })
}
