use std::fs;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use snifr_core::diff_engine::{Fault, GradCheckOptions};
use snifr_core::evaluation::{export_embeddings, render_table};
use snifr_core::feature_store::{
    reference_class_proportions, read_dataset, stratified_kfold, synth_complementary, synth_with, write_dataset,
    SynthOptions, SynthSignal,
};
use snifr_core::model_zoo::{load_checkpoint, Batch};
use snifr_core::training::run_cv_with_plan;
use snifr_core::{ClipRecord, CvOptions, CvResult, Dataset, EvalReport, FusionKind, Label, Mode, Model, ModelConfig, TrainConfig};

use crate::args::{CompareArgs, ExportArgs, GradcheckArgs, RunArgs, Signal, SynthArgs, TrainArgs};
use crate::manifest::{write_json, RunManifest};
use crate::CliError;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| rand::rng().random())
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Failure(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    if !(a.sigma > 0.0 && a.sigma.is_finite()) {
        return Err(usage(format!("--sigma must be positive, got {}", a.sigma)));
    }
    if a.n < 40 {
        return Err(usage(format!("--n must be at least 40, got {}", a.n)));
    }
    let seed = resolve_seed(a.seed);
    RunManifest::new("synth", Some(seed), 1, &a.out, &a).write(&sibling_manifest(&a.out))?;
    let dataset = if a.signal == Signal::Both && !a.imbalanced {
        synth_complementary(a.n, a.sigma, seed)?
    } else {
        let signal = match a.signal {
            Signal::Both => SynthSignal::Both,
            Signal::Audio => SynthSignal::Audio,
            Signal::Video => SynthSignal::Video,
        };
        let proportions = a.imbalanced.then(|| {
            let p = reference_class_proportions();
            Label::ALL.map(|l| p[&l])
        });
        synth_with(&SynthOptions { signal, proportions, ..SynthOptions::new(a.n, a.sigma, seed) })?
    };
    write_dataset(&dataset, &a.out)?;
    emit(&format!("wrote {} records to {}\n", dataset.len(), a.out.display()))
}

#[derive(Debug, Serialize)]
struct ResolvedRun {
    data: PathBuf,
    models: Vec<ModelConfig>,
    train: TrainConfig,
    cv: CvOptions,
}

fn threads(requested: Option<usize>, cap: usize) -> Result<usize, CliError> {
    let from_env = match std::env::var("SNIFR_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| usage(format!("SNIFR_THREADS={v:?} is not a count")))?),
        Err(_) => None,
    };
    let n = from_env
        .or(requested)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(usage("thread count must be at least 1"));
    }
    Ok(n.min(cap.max(1)))
}

fn resolve_run(run: &RunArgs, kinds: &[FusionKind]) -> Result<(ResolvedRun, u64), CliError> {
    let seed = resolve_seed(run.seed);
    if run.folds < 2 {
        return Err(usage(format!("--folds must be at least 2, got {}", run.folds)));
    }
    let models: Vec<ModelConfig> = kinds
        .iter()
        .map(|&k| ModelConfig {
            d_model: run.dmodel,
            n_heads: run.heads,
            d_ff: run.dff.unwrap_or(2 * run.dmodel),
            dropout_p: run.dropout,
            seed,
            ..ModelConfig::new(k)
        })
        .collect();
    for m in &models {
        m.validate().map_err(usage)?;
    }
    let train = TrainConfig {
        lr: run.lr,
        weight_decay: run.wd,
        epochs: run.epochs,
        batch_size: run.batch,
        early_stop_patience: (run.patience > 0).then_some(run.patience),
        val_fraction: run.val_fraction,
        seed,
        class_weighting: run.class_weighting,
        max_grad_norm: run.max_grad_norm,
        ..TrainConfig::default()
    };
    train.validate().map_err(usage)?;
    let cv = CvOptions {
        k: run.folds,
        fold_seed: seed,
        checkpoint_dir: None,
        jobs: threads(run.jobs, run.folds * kinds.len())?,
    };
    Ok((ResolvedRun { data: run.data.clone(), models, train, cv }, seed))
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    read_dataset(path).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

/// Runs cross-validation for one model and writes its per-fold files into
/// `dir`.
fn run_model(
    data: &Dataset,
    plan: &snifr_core::FoldPlan,
    cfg: &ModelConfig,
    resolved: &ResolvedRun,
    dir: &Path,
) -> Result<CvResult, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let opts = CvOptions { checkpoint_dir: Some(dir.to_path_buf()), ..resolved.cv.clone() };
    let result = run_cv_with_plan(data, plan, cfg, &resolved.train, &opts)?;
    for f in &result.folds {
        write_json(&dir.join(format!("fold_{}.json", f.fold)), f)?;
        let log = dir.join(format!("epochs_fold_{}.jsonl", f.fold));
        fs::write(&log, f.record.to_json_lines()).map_err(|e| CliError::io(&log, e))?;
        for w in &f.record.warnings {
            log::warn!("{} fold {}: {w}", cfg.fusion, f.fold);
        }
    }
    #[derive(Serialize)]
    struct Mean<'a> {
        model: FusionKind,
        plan_digest: &'a str,
        mean: &'a EvalReport,
    }
    write_json(&dir.join("mean.json"), &Mean { model: cfg.fusion, plan_digest: &result.plan_digest, mean: &result.mean })?;
    Ok(result)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let (resolved, seed) = resolve_run(&a.run, &[a.model])?;
    let out = &a.run.out_dir;
    RunManifest::new("train", Some(seed), resolved.cv.jobs, out, &resolved).write(&out.join("manifest.json"))?;
    let data = load(&resolved.data)?;
    let plan = stratified_kfold(&data, resolved.cv.k, resolved.cv.fold_seed)?;
    let result = run_model(&data, &plan, &resolved.models[0], &resolved, out)?;
    let table = render_table(&[(a.model.name(), &result.mean)]);
    fs::write(out.join("table.txt"), &table).map_err(|e| CliError::io(out, e))?;
    emit(&table)
}

pub fn compare(a: CompareArgs) -> Result<(), CliError> {
    if a.models.len() < 2 {
        return Err(usage("--models needs at least two model kinds"));
    }
    let (resolved, seed) = resolve_run(&a.run, &a.models)?;
    let out = &a.run.out_dir;
    RunManifest::new("compare", Some(seed), resolved.cv.jobs, out, &resolved).write(&out.join("manifest.json"))?;
    let data = load(&resolved.data)?;
    let plan = stratified_kfold(&data, resolved.cv.k, resolved.cv.fold_seed)?;

    #[derive(Serialize)]
    struct Row {
        model: FusionKind,
        plan_digest: String,
        mean: EvalReport,
        folds: Vec<EvalReport>,
    }
    let run = |cfg: &ModelConfig| -> Result<Row, CliError> {
        let result = run_model(&data, &plan, cfg, &resolved, &out.join(cfg.fusion.name()))?;
        log::info!("{}: total acc {:.4}", cfg.fusion, result.mean.totals.acc);
        Ok(Row {
            model: cfg.fusion,
            plan_digest: result.plan_digest,
            mean: result.mean,
            folds: result.folds.into_iter().map(|f| f.report).collect(),
        })
    };
    let rows: Vec<Row> = if resolved.cv.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(resolved.cv.jobs)
            .build()
            .map_err(|e| CliError::Failure(format!("worker pool: {e}")))?;
        pool.install(|| resolved.models.par_iter().map(run).collect::<Result<_, _>>())?
    } else {
        resolved.models.iter().map(run).collect::<Result<_, _>>()?
    };
    #[derive(Serialize)]
    struct Comparison<'a> {
        plan_digest: String,
        rows: &'a [Row],
    }
    write_json(&out.join("compare.json"), &Comparison { plan_digest: plan.digest(), rows: &rows })?;
    let named: Vec<(&str, &EvalReport)> = rows.iter().map(|r| (r.model.name(), &r.mean)).collect();
    let table = render_table(&named);
    fs::write(out.join("compare.txt"), &table).map_err(|e| CliError::io(out, e))?;
    emit(&table)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed);
    let cfg = ModelConfig { d_model: a.dmodel, d_ff: 2 * a.dmodel, seed, ..ModelConfig::new(a.model) };
    cfg.validate().map_err(usage)?;
    let manifest = RunManifest::new("gradcheck", Some(seed), 1, a.out_dir.as_deref().unwrap_or(Path::new("-")), (&a, &cfg));
    match &a.out_dir {
        Some(dir) => manifest.write(&dir.join("manifest.json"))?,
        None => log::info!("{}", serde_json::to_string(&manifest).unwrap_or_default()),
    }
    let data = synth_complementary(40, 0.1, seed)?;
    let batch = Batch::from_records(data.records().iter().take(2))?;
    let model = Model::build(cfg)?;
    let opts = GradCheckOptions {
        seed,
        fault: a.inject_fault.then_some(Fault::ScaleMatmulRhsGrad(2.0)),
        ..GradCheckOptions::default()
    };
    let report = model.grad_check(&batch, Mode::Eval, seed, &opts)?;
    let mut rows: Vec<(&str, f64)> =
        report.params.iter().map(|p| (model.param_names()[p.index].as_str(), p.max_rel_error)).collect();
    rows.sort_by(|x, y| y.1.total_cmp(&x.1));
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let mut text = String::new();
    for (name, err) in &rows {
        let _ = writeln!(text, "{name:width$}  {err:.3e}");
    }
    let _ = writeln!(text, "max relative error: {:.3e} ({} parameters)", report.max_rel_error, model.param_count());
    if let Some(dir) = &a.out_dir {
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        text.push_str("PASS\n");
        emit(&text)
    } else {
        emit(&text)?;
        let worst: Vec<String> = rows.iter().take(5).map(|(n, e)| format!("{n} {e:.2e}")).collect();
        Err(CliError::Failure(format!(
            "gradient check failed ({:.3e} >= {GRADCHECK_TOLERANCE:e}); worst: {}",
            report.max_rel_error,
            worst.join(", ")
        )))
    }
}

pub fn export(a: ExportArgs) -> Result<(), CliError> {
    RunManifest::new("export", None, 1, &a.out, &a).write(&sibling_manifest(&a.out))?;
    let model = load_checkpoint(&a.checkpoint).map_err(|e| CliError::Failure(format!("{}: {e}", a.checkpoint.display())))?;
    let data = load(&a.data)?;
    let records: Vec<&ClipRecord> = data.records().iter().collect();
    export_embeddings(&model, &records, &a.out, 256)?;
    emit(&format!("wrote {} embeddings to {}\n", records.len(), a.out.display()))
}
