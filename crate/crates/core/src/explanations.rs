//! Contrastive explanations from loss-maximizing and loss-minimizing
//! perturbations inside an L2 ball.
//!
//! For a correctly classified input, the loss-maximizing perturbation shows
//! what would have to be added to move the decision to a neighbouring class
//! (a pertinent negative) and the loss-minimizing one shows which present
//! features support the decision (a pertinent positive). For a misclassified
//! input the roles flip: maximizing the true-label loss reinforces the wrong
//! prediction, and minimizing it reveals what is missing for a correct one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, sample_seed, AttackConfig, Norm, Objective, Perturbation};
use crate::data::{Label, Sample};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, forward, ModelParams, Prediction};
use crate::render::{render_triptych, save_gray, Triptych, TriptychLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMaxRole {
    PertinentNegative,
    PertinentPositiveOfError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMinRole {
    PertinentPositive,
    MissingFeaturesForCorrect,
}

pub fn assign_roles(is_correct: bool) -> (DeltaMaxRole, DeltaMinRole) {
    if is_correct {
        (
            DeltaMaxRole::PertinentNegative,
            DeltaMinRole::PertinentPositive,
        )
    } else {
        (
            DeltaMaxRole::PertinentPositiveOfError,
            DeltaMinRole::MissingFeaturesForCorrect,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveExplanation {
    pub sample: Sample,
    pub prediction: Prediction,
    pub is_correct: bool,
    pub clean_loss: f64,
    pub delta_max_result: Perturbation,
    pub delta_min_result: Perturbation,
    pub role_of_delta_max: DeltaMaxRole,
    pub role_of_delta_min: DeltaMinRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    DeltaMin,
    DeltaMax,
}

/// Runs the maximizing and minimizing searches with the same template and
/// seed, then assigns roles from whether the clean prediction is correct.
pub fn explain(
    params: &ModelParams,
    sample: &Sample,
    epsilon: f64,
    template: &AttackConfig,
) -> Result<ContrastiveExplanation> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "explanation radius must be positive, got {epsilon}"
        )));
    }
    if template.norm != Norm::L2 {
        return Err(Error::Config("explanations use the L2 ball".into()));
    }
    let label = sample.label.index();
    let base = template
        .with_epsilon(epsilon)
        .with_seed(sample_seed(template.seed, sample));
    let delta_max_result = pgd(
        params,
        &sample.image,
        label,
        &base.with_objective(Objective::Maximize),
    )?;
    let delta_min_result = pgd(
        params,
        &sample.image,
        label,
        &base.with_objective(Objective::Minimize),
    )?;
    let prediction = delta_max_result.prediction_before.clone();
    let is_correct = prediction.predicted_class == label;
    let (role_of_delta_max, role_of_delta_min) = assign_roles(is_correct);
    Ok(ContrastiveExplanation {
        clean_loss: cross_entropy(&prediction.logits, label),
        sample: sample.clone(),
        prediction,
        is_correct,
        delta_max_result,
        delta_min_result,
        role_of_delta_max,
        role_of_delta_min,
    })
}

fn class_name(class: usize) -> String {
    Label::from_index(class).map_or_else(|| class.to_string(), |l| l.name().to_string())
}

pub fn triptych(explanation: &ContrastiveExplanation, which: Which) -> Triptych {
    let p = match which {
        Which::DeltaMin => &explanation.delta_min_result,
        Which::DeltaMax => &explanation.delta_max_result,
    };
    render_triptych(
        &explanation.sample.image,
        &p.delta,
        &TriptychLabels {
            target: explanation.sample.label.name().to_string(),
            prediction_before: class_name(p.prediction_before.predicted_class),
            prediction_after: class_name(p.prediction_after.predicted_class),
        },
    )
}

pub fn render_explanation(
    explanation: &ContrastiveExplanation,
    which: Which,
    path: &Path,
) -> Result<()> {
    save_gray(&triptych(explanation, which).image, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figures {
    pub delta_min: String,
    pub delta_max: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sample_id: String,
    pub label: Label,
    pub prediction: Option<String>,
    pub is_correct: Option<bool>,
    pub role_of_delta_max: Option<DeltaMaxRole>,
    pub role_of_delta_min: Option<DeltaMinRole>,
    pub clean_loss: Option<f64>,
    pub delta_max_loss: Option<f64>,
    pub delta_min_loss: Option<f64>,
    pub prediction_after_delta_max: Option<String>,
    pub prediction_after_delta_min: Option<String>,
    pub figures: Option<Figures>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationIndex {
    pub epsilon: f64,
    pub attack: AttackConfig,
    pub entries: Vec<IndexEntry>,
}

fn figure_stem(i: usize, s: &Sample) -> String {
    let safe: String = s
        .video_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{i:04}_{safe}_f{}", s.frame_index)
}

/// Explains and renders each sample into `correct/` or `error/` under
/// `out_dir`, and writes `index.json`. Failures are recorded per entry.
pub fn explain_batch(
    params: &ModelParams,
    samples: &[Sample],
    epsilon: f64,
    template: &AttackConfig,
    out_dir: &Path,
) -> Result<ExplanationIndex> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut entry = IndexEntry {
            sample_id: s.id(),
            label: s.label,
            prediction: None,
            is_correct: None,
            role_of_delta_max: None,
            role_of_delta_min: None,
            clean_loss: None,
            delta_max_loss: None,
            delta_min_loss: None,
            prediction_after_delta_max: None,
            prediction_after_delta_min: None,
            figures: None,
            error: None,
        };
        let outcome = explain(params, s, epsilon, template).and_then(|ex| {
            let sub = if ex.is_correct { "correct" } else { "error" };
            let stem = figure_stem(i, s);
            let rel_min = format!("{sub}/{stem}_min.png");
            let rel_max = format!("{sub}/{stem}_max.png");
            render_explanation(&ex, Which::DeltaMin, &out_dir.join(&rel_min))?;
            render_explanation(&ex, Which::DeltaMax, &out_dir.join(&rel_max))?;
            Ok((ex, rel_min, rel_max))
        });
        match outcome {
            Ok((ex, rel_min, rel_max)) => {
                entry.prediction = Some(class_name(ex.prediction.predicted_class));
                entry.is_correct = Some(ex.is_correct);
                entry.role_of_delta_max = Some(ex.role_of_delta_max);
                entry.role_of_delta_min = Some(ex.role_of_delta_min);
                entry.clean_loss = Some(ex.clean_loss);
                entry.delta_max_loss = Some(ex.delta_max_result.achieved_loss);
                entry.delta_min_loss = Some(ex.delta_min_result.achieved_loss);
                entry.prediction_after_delta_max = Some(class_name(
                    ex.delta_max_result.prediction_after.predicted_class,
                ));
                entry.prediction_after_delta_min = Some(class_name(
                    ex.delta_min_result.prediction_after.predicted_class,
                ));
                entry.figures = Some(Figures {
                    delta_min: rel_min,
                    delta_max: rel_max,
                });
            }
            Err(e) => {
                log::warn!("sample {}: {e}", s.id());
                entry.error = Some(e.to_string());
            }
        }
        entries.push(entry);
    }
    let index = ExplanationIndex {
        epsilon,
        attack: template.with_epsilon(epsilon),
        entries,
    };
    let path: PathBuf = out_dir.join("index.json");
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Samples the model misclassifies, in input order.
pub fn misclassified(params: &ModelParams, samples: &[Sample]) -> Result<Vec<Sample>> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let preds = forward(params, &images)?;
    Ok(samples
        .iter()
        .zip(preds)
        .filter(|(s, p)| p.predicted_class != s.label.index())
        .map(|(s, _)| s.clone())
        .collect())
}
