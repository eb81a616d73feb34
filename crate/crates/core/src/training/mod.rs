//! Optimisation, the epoch loop and k-fold cross-validation.

mod cv;
mod early_stop;
mod optimizer;
mod trainer;

pub use cv::{run_cv, run_cv_with_plan, CvOptions, CvResult, FoldResult};
pub use early_stop::{EarlyStopper, StopDecision};
pub use optimizer::{adamw_step, clip_grad_norm, OptimizerState};
pub use trainer::{class_weights, train_fold, train_fold_with, EpochRecord, Monitor, RunRecord};

use serde::{Deserialize, Serialize};

use crate::evaluation::EvalError;
use crate::feature_store::DataError;
use crate::model_zoo::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Epochs without improvement before stopping; `None` never stops early.
    pub early_stop_patience: Option<usize>,
    /// Share of the training records held out for early stopping. Zero
    /// disables the carve-out and trains for every epoch.
    pub val_fraction: f64,
    pub seed: u64,
    /// Inverse-frequency class weights in the loss.
    pub class_weighting: bool,
    /// Global L2 gradient clipping threshold.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 25,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            early_stop_patience: Some(5),
            val_fraction: 0.1,
            seed: 0,
            class_weighting: false,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps_adam > 0.0) {
            return bad("adam epsilon must be positive".into());
        }
        if self.early_stop_patience == Some(0) {
            return bad("patience must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return bad(format!("validation fraction {} not in [0, 0.5)", self.val_fraction));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return bad(format!("max grad norm {n} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: String, epoch: usize },
    #[error("empty training set")]
    EmptyTrainSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
