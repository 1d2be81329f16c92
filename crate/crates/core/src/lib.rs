//! Adversarial robustness toolkit for small image classifiers.
//!
//! Trains standard (ERM) and adversarially trained classifiers, attacks them
//! with projected gradient descent under L2/L∞ budgets, and derives
//! contrastive explanations and robustness reports from those attacks.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod explanations;
pub mod model;
pub mod render;
pub mod seed;
pub mod training;

pub use attacks::{attack_batch, pgd, project, AttackConfig, Norm, Objective, Perturbation};
pub use data::{
    group_kfold, load_dataset, preprocess, synth_generate, Dataset, Label, Sample, SynthConfig,
};
pub use error::{Error, Result};
pub use evaluation::{
    adversarial_accuracy, aggregate_folds, auroc_ovr, clean_accuracy, per_outcome_report,
    robustness_curve, OutcomeReport, RobustnessCurve,
};
pub use explanations::{explain, explain_batch, ContrastiveExplanation};
pub use model::{
    forward, grad_input, grad_params, init_model, loss, Architecture, ModelConfig, ModelParams,
    Prediction, Tensor,
};
pub use training::{
    lr_schedule, select_best, train_adversarial, train_erm, TrainConfig, TrainHistory, TrainMode,
};
