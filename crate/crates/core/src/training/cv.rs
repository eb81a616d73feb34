use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_fold, RunRecord, TrainConfig, TrainError};
use crate::evaluation::{evaluate_model, EvalReport};
use crate::feature_store::{stratified_kfold, Dataset, FoldPlan};
use crate::model_zoo::{save_checkpoint, FusionKind, Model, ModelConfig};
use crate::seed::mix_seed;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    /// Seed of the fold plan. Models compared under one seed share folds.
    pub fold_seed: u64,
    /// Where `fold_{i}.snfc` checkpoints go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    /// Worker threads for running folds side by side.
    pub jobs: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { k: 5, fold_seed: 0, checkpoint_dir: None, jobs: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub model_seed: u64,
    pub train_seed: u64,
    pub record: RunRecord,
    pub report: EvalReport,
    pub eval_ids: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvResult {
    pub fusion: FusionKind,
    pub plan_digest: String,
    pub folds: Vec<FoldResult>,
    pub mean: EvalReport,
}

/// Stratified k-fold cross-validation: a fresh model per fold, trained on
/// the other folds and scored on the held-out one.
pub fn run_cv(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &CvOptions,
) -> Result<CvResult, TrainError> {
    let plan = stratified_kfold(dataset, opts.k, opts.fold_seed)?;
    run_cv_with_plan(dataset, &plan, model_cfg, train_cfg, opts)
}

pub fn run_cv_with_plan(
    dataset: &Dataset,
    plan: &FoldPlan,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &CvOptions,
) -> Result<CvResult, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let run_one = |fold: usize| -> Result<FoldResult, TrainError> {
        let (train, eval) = plan.split(dataset, fold);
        let model_seed = mix_seed(model_cfg.seed, fold as u64);
        let train_seed = mix_seed(train_cfg.seed, fold as u64);
        let mut model = Model::build(ModelConfig { seed: model_seed, ..model_cfg.clone() })?;
        let cfg = TrainConfig { seed: train_seed, ..train_cfg.clone() };
        log::info!("{} fold {fold}: {} train / {} eval records", model_cfg.fusion, train.len(), eval.len());
        let mut record = train_fold(&mut model, &train, &cfg)?;
        if let Some(dir) = &opts.checkpoint_dir {
            let path = dir.join(format!("fold_{fold}.snfc"));
            save_checkpoint(&model, &path)?;
            record.checkpoint = Some(path.display().to_string());
        }
        let report = evaluate_model(&model, &eval, 256)?;
        Ok(FoldResult { fold, model_seed, train_seed, record, report, eval_ids: eval.iter().map(|r| r.clip_id).collect() })
    };
    let folds: Vec<FoldResult> = if opts.jobs > 1 && rayon::current_thread_index().is_some() {
        // Already inside a worker pool: share its threads.
        (0..plan.k()).into_par_iter().map(run_one).collect::<Result<_, _>>()?
    } else if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs.min(plan.k()))
            .build()
            .map_err(|e| TrainError::Config(format!("worker pool: {e}")))?;
        pool.install(|| (0..plan.k()).into_par_iter().map(run_one).collect::<Result<_, _>>())?
    } else {
        (0..plan.k()).map(run_one).collect::<Result<_, _>>()?
    };
    let reports: Vec<EvalReport> = folds.iter().map(|f| f.report.clone()).collect();
    Ok(CvResult {
        fusion: model_cfg.fusion,
        plan_digest: plan.digest(),
        mean: EvalReport::mean(&reports)?,
        folds,
    })
}
