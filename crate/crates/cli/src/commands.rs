//! The five pipeline commands. Each writes its outputs and a `manifest.json`
//! into the output directory; passing that manifest back as `--config`
//! reproduces the outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use robex::checkpoint;
use robex::data::{
    group_kfold, load_dataset, synth_generate, write_dataset, Dataset, Fold, Sample,
};
use robex::evaluation::{
    curves_csv, per_outcome_report, robustness_curve, ModelFolds, RobustnessCurve,
};
use robex::explanations::{explain_batch, misclassified};
use robex::model::ModelParams;
use robex::render::{render_curves, save_rgb};
use robex::seed::rng_from;
use robex::training::{select_best, train, TrainMode};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Best checkpoint and metrics of one trained fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub best_epoch: usize,
    /// Relative to the run directory.
    pub checkpoint: String,
    pub history: String,
    pub clean_val_accuracy: f64,
    pub adversarial_val_accuracy: Option<f64>,
    pub test_videos: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// Fully resolved configuration, including derived component seeds.
    pub config: RunConfig,
    /// Files written by the command, relative to the output directory.
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<FoldRecord>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: &RunConfig,
    mut outputs: Vec<String>,
    folds: Vec<FoldRecord>,
) -> Result<(), CliError> {
    outputs.sort();
    let manifest = Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        outputs,
        folds,
    };
    let mut json =
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    json.push('\n');
    write_file(&out.join(MANIFEST), json.as_bytes())
}

fn relative(out: &Path, path: &Path) -> String {
    path.strip_prefix(out)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn pool(config: &RunConfig) -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = config.jobs {
        builder = builder.num_threads(jobs);
    }
    builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn load_data(config: &RunConfig) -> Result<Dataset, CliError> {
    match &config.data_root {
        Some(root) => {
            if !root.is_dir() {
                return Err(CliError::Missing(root.clone()));
            }
            let (h, w) = config.input_size();
            Ok(load_dataset(root, h, w)?)
        }
        None => Ok(synth_generate(&config.synth)?),
    }
}

fn fold_dir(f: usize) -> String {
    format!("fold_{f}")
}

pub fn synth(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dataset = synth_generate(&config.synth)?;
    let written = write_dataset(&dataset, out)?;
    let outputs = written.iter().map(|p| relative(out, p)).collect();
    write_manifest(out, "synth", config, outputs, Vec::new())?;
    log::info!("wrote {} frames to {}", dataset.len(), out.display());
    Ok(())
}

fn video_ids(dataset: &Dataset) -> Vec<String> {
    let mut ids: Vec<String> = dataset.samples.iter().map(|s| s.video_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

pub fn train_runs(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dataset = load_data(config)?;
    let folds = group_kfold(&dataset, config.folds, config.kfold_seed())?;
    config.train.validate()?;
    let records = pool(config)?.install(|| {
        folds
            .par_iter()
            .enumerate()
            .map(|(f, fold)| train_fold(config, &dataset, f, fold, out))
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    let mut outputs = Vec::new();
    for r in &records {
        outputs.push(r.checkpoint.clone());
        outputs.push(r.history.clone());
        for epoch in 0..config.train.epochs {
            outputs.push(format!("{}/epoch_{epoch}.ckpt", fold_dir(r.fold)));
        }
    }
    write_manifest(out, "train", config, outputs, records)
}

fn train_fold(
    config: &RunConfig,
    dataset: &Dataset,
    f: usize,
    fold: &Fold,
    out: &Path,
) -> Result<FoldRecord, CliError> {
    let train_set = dataset.subset(&fold.train);
    let test_set = dataset.subset(&fold.test);
    let dir = out.join(fold_dir(f));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mode = config.train.mode;
    let history = train(
        &config.model_config(f),
        &config.train_config(f),
        &train_set,
        &test_set,
        Some(&dir),
    )
    .map_err(|e| match CliError::from(e) {
        CliError::Training(m) => CliError::Training(format!("fold {f}: {m}")),
        other => other,
    })?;
    let best = select_best(&history.records, mode)?;
    let record = &history.records[best];
    let best_path = dir.join("best.ckpt");
    checkpoint::save_params(&best_path, &history.snapshots[best])?;
    log::info!(
        "fold {f}: best epoch {best}, clean {:.3}, adversarial {:?}",
        record.clean_val_accuracy,
        record.adversarial_val_accuracy
    );
    Ok(FoldRecord {
        fold: f,
        best_epoch: best,
        checkpoint: format!("{}/best.ckpt", fold_dir(f)),
        history: format!("{}/history.jsonl", fold_dir(f)),
        clean_val_accuracy: record.clean_val_accuracy,
        adversarial_val_accuracy: record.adversarial_val_accuracy,
        test_videos: video_ids(&test_set),
    })
}

/// A trained run reloaded from its directory: best models and the matching
/// test folds.
pub struct LoadedRun {
    pub model_id: String,
    pub mode: TrainMode,
    pub models: Vec<ModelParams>,
    pub test_sets: Vec<Dataset>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(CliError::Missing(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let manifest = read_manifest(dir)?;
    if manifest.command != "train" {
        return Err(CliError::Config(format!(
            "{} is a '{}' output, not a training run",
            dir.display(),
            manifest.command
        )));
    }
    let rc = &manifest.config;
    let dataset = load_data(rc)?;
    let folds = group_kfold(&dataset, rc.folds, rc.kfold_seed())?;
    let mut models = Vec::new();
    let mut test_sets = Vec::new();
    for record in &manifest.folds {
        let path = dir.join(&record.checkpoint);
        if !path.is_file() {
            return Err(CliError::Missing(path));
        }
        let fold = folds
            .get(record.fold)
            .ok_or_else(|| CliError::Config(format!("run has no fold {}", record.fold)))?;
        let test_set = dataset.subset(&fold.test);
        if video_ids(&test_set) != record.test_videos {
            return Err(CliError::Config(format!(
                "fold {} of {} no longer matches its data",
                record.fold,
                dir.display()
            )));
        }
        models.push(checkpoint::load_params(&path)?);
        test_sets.push(test_set);
    }
    let model_id = rc.model_id.clone().unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    Ok(LoadedRun {
        model_id,
        mode: rc.train.mode,
        models,
        test_sets,
    })
}

fn load_runs(config: &RunConfig) -> Result<Vec<LoadedRun>, CliError> {
    if config.runs.is_empty() {
        return Err(CliError::Config("no run directories given".into()));
    }
    config.runs.iter().map(|d| load_run(d)).collect()
}

pub fn curve(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let runs = load_runs(config)?;
    let curves: Vec<(RobustnessCurve, TrainMode)> = pool(config)?.install(|| {
        runs.iter()
            .map(|r| {
                robustness_curve(
                    &r.model_id,
                    &r.models,
                    &r.test_sets,
                    &config.epsilons,
                    &config.eval_attack,
                )
                .map(|c| (c, r.mode))
            })
            .collect::<robex::Result<Vec<_>>>()
    })?;
    let plain: Vec<RobustnessCurve> = curves.iter().map(|(c, _)| c.clone()).collect();
    write_file(&out.join("curves.csv"), curves_csv(&plain).as_bytes())?;
    let mut json = serde_json::to_string_pretty(&plain).map_err(|e| CliError::Io(e.to_string()))?;
    json.push('\n');
    write_file(&out.join("curves.json"), json.as_bytes())?;
    save_rgb(&render_curves(&curves), &out.join("curves.png"))?;
    for (c, _) in &curves {
        log::info!("{}: mean accuracy {:?}", c.model_id, c.mean);
    }
    let outputs = vec![
        "curves.csv".into(),
        "curves.json".into(),
        "curves.png".into(),
    ];
    write_manifest(out, "curve", config, outputs, Vec::new())
}

pub fn report(config: &RunConfig, out: &Path) -> Result<String, CliError> {
    let runs = load_runs(config)?;
    let entries: Vec<ModelFolds> = runs
        .into_iter()
        .map(|r| ModelFolds {
            model_id: r.model_id,
            models: r.models,
            test_sets: r.test_sets,
        })
        .collect();
    let report = per_outcome_report(&entries)?;
    let table = report.to_table();
    write_file(&out.join("report.txt"), table.as_bytes())?;
    write_file(&out.join("report.csv"), report.to_csv().as_bytes())?;
    let outputs = vec!["report.txt".into(), "report.csv".into()];
    write_manifest(out, "report", config, outputs, Vec::new())?;
    Ok(table)
}

pub fn explain(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dir: &PathBuf = config
        .runs
        .first()
        .ok_or_else(|| CliError::Config("explain needs a run directory".into()))?;
    let run = load_run(dir)?;
    let settings = &config.explain;
    let (params, test) = run
        .models
        .get(settings.fold)
        .zip(run.test_sets.get(settings.fold))
        .ok_or_else(|| CliError::Config(format!("run has no fold {}", settings.fold)))?;
    let mut pool_samples: Vec<Sample> = if settings.only_errors {
        misclassified(params, &test.samples)?
    } else {
        test.samples.clone()
    };
    pool_samples.shuffle(&mut rng_from(config.sample_choice_seed()));
    pool_samples.truncate(settings.num_samples);
    if pool_samples.len() < settings.num_samples {
        log::warn!(
            "only {} candidate samples for {} requested",
            pool_samples.len(),
            settings.num_samples
        );
    }
    let index = pool(config)?.install(|| {
        explain_batch(
            params,
            &pool_samples,
            settings.epsilon,
            &settings.attack,
            out,
        )
    })?;
    let mut outputs: Vec<String> = vec!["index.json".into()];
    for e in &index.entries {
        if let Some(f) = &e.figures {
            outputs.push(f.delta_min.clone());
            outputs.push(f.delta_max.clone());
        }
    }
    let failures: BTreeMap<&str, &str> = index
        .entries
        .iter()
        .filter_map(|e| e.error.as_deref().map(|m| (e.sample_id.as_str(), m)))
        .collect();
    for (id, m) in &failures {
        log::warn!("{id}: {m}");
    }
    write_manifest(out, "explain", config, outputs, Vec::new())
}
