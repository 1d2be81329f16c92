//! Standard (ERM) and adversarial training with step-decayed SGD and
//! best-epoch selection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, sample_seed, AttackConfig, Objective, EVAL_STEPS};
use crate::checkpoint::{self, Checkpoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{adversarial_accuracy, clean_accuracy};
use crate::model::{init_model, loss_and_grad_params, ModelConfig, ModelParams, Tensor};
use crate::seed::{derive_seed, derived_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Erm,
    At,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Inner maximization used by adversarial training.
    pub attack: Option<AttackConfig>,
    /// PGD steps of the validation attack used for robust model selection.
    pub eval_attack_steps: usize,
    /// Epochs over which the training radius ramps linearly up to the
    /// attack's epsilon; 0 trains at the full radius from the start.
    pub epsilon_warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Erm,
            epochs: 51,
            base_lr: 0.01,
            lr_decay_factor: 10.0,
            lr_decay_every: 15,
            batch_size: 32,
            momentum: 0.9,
            attack: None,
            eval_attack_steps: EVAL_STEPS,
            epsilon_warmup_epochs: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor <= 0.0 || self.lr_decay_every == 0
        {
            return Err(Error::Config("learning-rate decay must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        match (self.mode, &self.attack) {
            (TrainMode::At, None) => {
                return Err(Error::Config("adversarial training needs an attack".into()))
            }
            (TrainMode::At, Some(a)) => {
                a.validate()?;
                if a.objective != Objective::Maximize {
                    return Err(Error::Config(
                        "training attack must maximize the loss".into(),
                    ));
                }
            }
            (TrainMode::Erm, Some(_)) => {
                return Err(Error::Config("standard training takes no attack".into()))
            }
            (TrainMode::Erm, None) => {}
        }
        if self.eval_attack_steps == 0 {
            return Err(Error::Config("eval_attack_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Attack used to score adversarial validation accuracy: the training
    /// radius with evaluation-grade steps.
    pub fn validation_attack(&self) -> Option<AttackConfig> {
        self.attack.as_ref().map(|a| AttackConfig {
            num_steps: self.eval_attack_steps,
            step_size: None,
            seed: derive_seed(self.seed, "validation-attack"),
            ..a.clone()
        })
    }
}

/// Training radius at `epoch`: `epsilon · min(1, (epoch + 1) / warmup)`.
pub fn training_epsilon(epoch: usize, epsilon: f64, config: &TrainConfig) -> f64 {
    let w = config.epsilon_warmup_epochs;
    if epoch + 1 >= w {
        epsilon
    } else {
        epsilon * (epoch + 1) as f64 / w as f64
    }
}

/// `base_lr / decay_factor^⌊epoch / decay_every⌋` with 0-indexed epochs.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let k = (epoch / config.lr_decay_every) as i32;
    config.base_lr / config.lr_decay_factor.powi(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub clean_val_accuracy: f64,
    pub adversarial_val_accuracy: Option<f64>,
    /// Number of PGD calls made by the inner maximization this epoch.
    pub attack_calls: usize,
    /// Checkpoint file, relative to the run directory.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Parameters at the end of each epoch, aligned with `records`.
    pub snapshots: Vec<ModelParams>,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Epoch with the best selection metric: clean validation accuracy for ERM,
/// adversarial validation accuracy for AT. Ties go to the earliest epoch.
pub fn select_best(records: &[EpochRecord], mode: TrainMode) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::Input("cannot select from an empty history".into()));
    }
    let metric = |r: &EpochRecord| -> Result<f64> {
        match mode {
            TrainMode::Erm => Ok(r.clean_val_accuracy),
            TrainMode::At => r.adversarial_val_accuracy.ok_or_else(|| {
                Error::Input(format!("epoch {} has no adversarial accuracy", r.epoch))
            }),
        }
    };
    let mut best = 0;
    let mut best_value = metric(&records[0])?;
    for (i, r) in records.iter().enumerate().skip(1) {
        let v = metric(r)?;
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    Ok(best)
}

const MOMENTUM_PREFIX: &str = "optim/momentum/";

/// SGD-with-momentum training state for one model.
///
/// Each epoch's shuffle and attack seeds derive from `(seed, epoch)`, so a
/// trainer resumed from an epoch checkpoint replays the following epochs
/// exactly.
pub struct Trainer<'a> {
    config: TrainConfig,
    train: &'a Dataset,
    val: &'a Dataset,
    params: ModelParams,
    velocity: ModelParams,
    next_epoch: usize,
    run_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model_config: &ModelConfig,
        config: &TrainConfig,
        train: &'a Dataset,
        val: &'a Dataset,
    ) -> Result<Self> {
        let params = init_model(model_config)?;
        Self::from_state(config, train, val, params, None, 0)
    }

    /// Continues from a checkpoint written at the end of epoch `next_epoch - 1`.
    pub fn resume(
        config: &TrainConfig,
        train: &'a Dataset,
        val: &'a Dataset,
        checkpoint: Checkpoint,
        next_epoch: usize,
    ) -> Result<Self> {
        let mut velocity = ModelParams::zeros_like(checkpoint.params.config());
        let names: Vec<String> = velocity.tensors().iter().map(|t| t.name.clone()).collect();
        for name in names {
            let key = format!("{MOMENTUM_PREFIX}{name}");
            let stored = checkpoint
                .extras
                .iter()
                .find(|t| t.name == key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
            velocity = velocity.with_tensor(&name, stored.data.clone())?;
        }
        Self::from_state(
            config,
            train,
            val,
            checkpoint.params,
            Some(velocity),
            next_epoch,
        )
    }

    fn from_state(
        config: &TrainConfig,
        train: &'a Dataset,
        val: &'a Dataset,
        params: ModelParams,
        velocity: Option<ModelParams>,
        next_epoch: usize,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        if val.is_empty() {
            return Err(Error::Input("validation set is empty".into()));
        }
        let k = params.config().num_classes;
        if let Some(s) = train.samples.iter().find(|s| s.label.index() >= k) {
            return Err(Error::Input(format!(
                "label {} exceeds {k} classes",
                s.label
            )));
        }
        let velocity = velocity.unwrap_or_else(|| ModelParams::zeros_like(params.config()));
        Ok(Self {
            config: config.clone(),
            train,
            val,
            params,
            velocity,
            next_epoch,
            run_dir: None,
        })
    }

    /// Writes `epoch_{k}.ckpt` into `dir` after every epoch.
    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(dir.into());
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    fn batch_inputs(&self, epoch: usize, batch: &[usize]) -> Result<(Vec<Array2<f64>>, usize)> {
        let mut calls = 0;
        let images = match (&self.config.mode, &self.config.attack) {
            (TrainMode::At, Some(attack)) => {
                let attack =
                    attack.with_epsilon(training_epsilon(epoch, attack.epsilon, &self.config));
                batch
                    .iter()
                    .map(|&i| {
                        let s = &self.train.samples[i];
                        let base = derive_seed(self.config.seed, &format!("attack/epoch={epoch}"));
                        let cfg = attack.with_seed(sample_seed(base, s));
                        calls += 1;
                        pgd(&self.params, &s.image, s.label.index(), &cfg)
                            .map(|p| p.apply(&s.image))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            _ => batch
                .iter()
                .map(|&i| self.train.samples[i].image.clone())
                .collect(),
        };
        Ok((images, calls))
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.next_epoch;
        let lr = lr_schedule(epoch, &self.config);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut derived_rng(
            self.config.seed,
            &format!("shuffle/epoch={epoch}"),
        ));

        let mut loss_sum = 0.0;
        let mut attack_calls = 0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let (images, calls) = self.batch_inputs(epoch, batch).map_err(|e| match e {
                Error::Attack { step, message } => Error::Training {
                    epoch,
                    batch: b,
                    message: format!("inner attack failed at step {step}: {message}"),
                },
                other => other,
            })?;
            attack_calls += calls;
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| self.train.samples[i].label.index())
                .collect();
            let (loss, grads) = loss_and_grad_params(&self.params, &images, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    message: format!("loss is {loss}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            let momentum = self.config.momentum;
            for ((p, v), g) in self
                .params
                .tensors_mut()
                .iter_mut()
                .zip(self.velocity.tensors_mut().iter_mut())
                .zip(grads.tensors())
            {
                for ((pv, vv), gv) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
                    *vv = momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
            }
            if !self.params.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    message: "parameters became non-finite".into(),
                });
            }
        }

        let clean_val_accuracy = clean_accuracy(&self.params, self.val)?;
        let adversarial_val_accuracy = match (self.config.mode, self.config.validation_attack()) {
            (TrainMode::At, Some(attack)) => {
                Some(adversarial_accuracy(&self.params, self.val, &attack)?)
            }
            _ => None,
        };
        let checkpoint = match &self.run_dir {
            Some(dir) => {
                let name = format!("epoch_{epoch}.ckpt");
                let extras = self.momentum_tensors();
                checkpoint::save(&dir.join(&name), &self.params, &extras)?;
                Some(name)
            }
            None => None,
        };
        self.next_epoch += 1;
        Ok(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / self.train.len() as f64,
            clean_val_accuracy,
            adversarial_val_accuracy,
            attack_calls,
            checkpoint,
        })
    }

    fn momentum_tensors(&self) -> Vec<Tensor> {
        self.velocity
            .tensors()
            .iter()
            .map(|t| Tensor {
                name: format!("{MOMENTUM_PREFIX}{}", t.name),
                ..t.clone()
            })
            .collect()
    }

    /// Runs the remaining epochs, appending history lines to
    /// `<run_dir>/history.jsonl` when a run directory is set.
    pub fn run(mut self) -> Result<TrainHistory> {
        let mut history = TrainHistory::default();
        let mut log = match &self.run_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("history.jsonl");
                Some((
                    fs::File::create(&path).map_err(|e| Error::io(&path, e))?,
                    path,
                ))
            }
            None => None,
        };
        while self.next_epoch < self.config.epochs {
            let record = self.run_epoch()?;
            log::info!(
                "epoch {} lr {:.0e} loss {:.4} clean {:.3} adv {:?}",
                record.epoch,
                record.learning_rate,
                record.train_loss,
                record.clean_val_accuracy,
                record.adversarial_val_accuracy
            );
            if let Some((file, path)) = log.as_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            history.records.push(record);
            history.snapshots.push(self.params.clone());
        }
        Ok(history)
    }
}

pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    run_dir: Option<&Path>,
) -> Result<TrainHistory> {
    let trainer = Trainer::new(model_config, config, train_set, val_set)?;
    match run_dir {
        Some(dir) => trainer.with_run_dir(dir).run(),
        None => trainer.run(),
    }
}

pub fn train_erm(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainHistory> {
    if config.mode != TrainMode::Erm {
        return Err(Error::Config("train_erm called with an AT config".into()));
    }
    train(model_config, config, train_set, val_set, None)
}

pub fn train_adversarial(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainHistory> {
    if config.mode != TrainMode::At {
        return Err(Error::Config(
            "train_adversarial called with an ERM config".into(),
        ));
    }
    train(model_config, config, train_set, val_set, None)
}
