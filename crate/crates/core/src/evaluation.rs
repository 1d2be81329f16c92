//! Clean and adversarial accuracy, robustness curves, per-outcome reports.

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_traced, sample_seed, AttackConfig, Objective};
use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};

pub fn clean_accuracy(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input(
            "accuracy of an empty dataset is undefined".into(),
        ));
    }
    let preds = forward(params, &dataset.images())?;
    let correct = preds
        .iter()
        .zip(&dataset.samples)
        .filter(|(p, s)| p.predicted_class == s.label.index())
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Per-sample outcome of an attack at one radius: the first misclassified
/// point's perturbation, if any, and the loss-maximizing perturbation.
fn attack_sample(
    params: &ModelParams,
    dataset: &Dataset,
    index: usize,
    attack: &AttackConfig,
    warm: &[Array2<f64>],
) -> Result<(Option<Array2<f64>>, Array2<f64>)> {
    let s = &dataset.samples[index];
    let cfg = attack.with_seed(sample_seed(attack.seed, s));
    let traced = pgd_traced(params, &s.image, s.label.index(), &cfg, warm)?;
    Ok((traced.first_flip, traced.perturbation.delta))
}

fn check_attack(attack: &AttackConfig) -> Result<()> {
    attack.validate()?;
    if attack.objective != Objective::Maximize {
        return Err(Error::Config(
            "adversarial accuracy needs a maximizing attack".into(),
        ));
    }
    Ok(())
}

/// Fraction of samples that no PGD iterate managed to misclassify.
pub fn adversarial_accuracy(
    params: &ModelParams,
    dataset: &Dataset,
    attack: &AttackConfig,
) -> Result<f64> {
    check_attack(attack)?;
    if dataset.is_empty() {
        return Err(Error::Input(
            "accuracy of an empty dataset is undefined".into(),
        ));
    }
    let flips = (0..dataset.len())
        .into_par_iter()
        .map(|i| attack_sample(params, dataset, i, attack, &[]).map(|(f, _)| f.is_some()))
        .collect::<Result<Vec<bool>>>()?;
    let correct = flips.iter().filter(|f| !**f).count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Adversarial accuracy at each radius of an ascending grid.
///
/// Each radius's search receives the best perturbation from the previous
/// radius as an extra candidate. Once a sample is misclassified at some
/// radius, that perturbation lies inside every larger ball, so the sample is
/// counted as broken from there on without further search. The returned
/// accuracies are therefore non-increasing.
pub fn accuracy_over_epsilons(
    params: &ModelParams,
    dataset: &Dataset,
    epsilons: &[f64],
    template: &AttackConfig,
) -> Result<Vec<f64>> {
    check_attack(template)?;
    check_grid(epsilons)?;
    if dataset.is_empty() {
        return Err(Error::Input(
            "accuracy of an empty dataset is undefined".into(),
        ));
    }
    let broken_at: Vec<Option<usize>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let mut warm: Vec<Array2<f64>> = Vec::new();
            for (k, &eps) in epsilons.iter().enumerate() {
                let (flip, best) =
                    attack_sample(params, dataset, i, &template.with_epsilon(eps), &warm)?;
                if flip.is_some() {
                    return Ok(Some(k));
                }
                warm = vec![best];
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;
    Ok((0..epsilons.len())
        .map(|k| {
            let survivors = broken_at
                .iter()
                .filter(|b| b.is_none_or(|at| at > k))
                .count();
            survivors as f64 / dataset.len() as f64
        })
        .collect())
}

fn check_grid(epsilons: &[f64]) -> Result<()> {
    if epsilons.first() != Some(&0.0) {
        return Err(Error::Config("epsilon grid must start at 0".into()));
    }
    if epsilons.windows(2).any(|w| w[1].is_nan() || w[1] <= w[0]) {
        return Err(Error::Config(
            "epsilon grid must be strictly ascending".into(),
        ));
    }
    Ok(())
}

/// Arithmetic mean and population standard deviation.
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Input("cannot aggregate zero folds".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub model_id: String,
    pub epsilons: Vec<f64>,
    /// `per_fold[f][e]` is the accuracy of fold `f` at `epsilons[e]`.
    pub per_fold: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RobustnessCurve {
    /// Rows of `model_id,fold,epsilon,accuracy`, without header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (f, accs) in self.per_fold.iter().enumerate() {
            for (eps, acc) in self.epsilons.iter().zip(accs) {
                writeln!(out, "{},{},{},{}", self.model_id, f, eps, acc).expect("write to string");
            }
        }
        out
    }
}

pub const CURVE_CSV_HEADER: &str = "model_id,fold,epsilon,accuracy";

pub fn curves_csv(curves: &[RobustnessCurve]) -> String {
    let mut out = format!("{CURVE_CSV_HEADER}\n");
    for c in curves {
        out.push_str(&c.csv_rows());
    }
    out
}

/// Robustness curve of one model family across folds: `models[f]` is
/// evaluated on `test_sets[f]`.
pub fn robustness_curve(
    model_id: &str,
    models: &[ModelParams],
    test_sets: &[Dataset],
    epsilons: &[f64],
    template: &AttackConfig,
) -> Result<RobustnessCurve> {
    if models.len() != test_sets.len() {
        return Err(Error::Input(format!(
            "{} checkpoints for {} folds",
            models.len(),
            test_sets.len()
        )));
    }
    if models.is_empty() {
        return Err(Error::Input("no folds to evaluate".into()));
    }
    check_grid(epsilons)?;
    let per_fold = models
        .par_iter()
        .zip(test_sets)
        .map(|(m, ds)| accuracy_over_epsilons(m, ds, epsilons, template))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = Vec::with_capacity(epsilons.len());
    let mut std = Vec::with_capacity(epsilons.len());
    for e in 0..epsilons.len() {
        let column: Vec<f64> = per_fold.iter().map(|row| row[e]).collect();
        let (m, s) = aggregate_folds(&column)?;
        mean.push(m);
        std.push(s);
    }
    Ok(RobustnessCurve {
        model_id: model_id.to_string(),
        epsilons: epsilons.to_vec(),
        per_fold,
        mean,
        std,
    })
}

/// One-vs-rest AUROC per class, `None` where a class lacks positives or
/// negatives.
///
/// Uses the Mann–Whitney rank statistic with mid-ranks for ties, which equals
/// `P(score⁺ > score⁻) + ½·P(tie)` exactly.
pub fn auroc_ovr(
    scores: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Option<f64>>> {
    if scores.len() != labels.len() {
        return Err(Error::Input("scores and labels differ in length".into()));
    }
    if let Some(bad) = scores.iter().find(|s| s.len() != num_classes) {
        return Err(Error::Input(format!(
            "score vector of length {} for {num_classes} classes",
            bad.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Input(format!("label {l} out of range")));
    }
    Ok((0..num_classes)
        .map(|c| binary_auroc(scores.iter().map(|s| s[c]), labels.iter().map(|&l| l == c)))
        .collect())
}

fn binary_auroc(
    scores: impl Iterator<Item = f64>,
    positive: impl Iterator<Item = bool>,
) -> Option<f64> {
    let mut pairs: Vec<(f64, bool)> = scores.zip(positive).collect();
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of mid-ranks (1-based) of the positives, doubled to stay integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as u64;
        let pos_in_group = pairs[i..j].iter().filter(|p| p.1).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    // 2U = 2R - P(P+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Some(twice_u as f64 / (2 * p * n) as f64)
}

/// Recall of each class; `None` for classes absent from `labels`.
pub fn per_class_recall(
    predicted: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let total = labels.iter().filter(|&&l| l == c).count();
            if total == 0 {
                return None;
            }
            let hit = predicted
                .iter()
                .zip(labels)
                .filter(|(&p, &l)| l == c && p == c)
                .count();
            Some(hit as f64 / total as f64)
        })
        .collect()
}

/// Checkpoints of one model family and the test fold each is evaluated on.
#[derive(Debug, Clone)]
pub struct ModelFolds {
    pub model_id: String,
    pub models: Vec<ModelParams>,
    pub test_sets: Vec<Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub model_id: String,
    pub outcome: Label,
    /// Mean per-class recall across folds.
    pub accuracy: Option<f64>,
    /// Mean one-vs-rest AUROC across folds.
    pub auroc: Option<f64>,
    pub folds_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub rows: Vec<OutcomeRow>,
}

pub fn per_outcome_report(entries: &[ModelFolds]) -> Result<OutcomeReport> {
    let mut rows = Vec::new();
    for entry in entries {
        if entry.models.len() != entry.test_sets.len() || entry.models.is_empty() {
            return Err(Error::Input(format!(
                "model {}: {} checkpoints for {} folds",
                entry.model_id,
                entry.models.len(),
                entry.test_sets.len()
            )));
        }
        let mut recalls: Vec<Vec<f64>> = vec![Vec::new(); Label::ALL.len()];
        let mut aurocs: Vec<Vec<f64>> = vec![Vec::new(); Label::ALL.len()];
        for (fold, (params, test)) in entry.models.iter().zip(&entry.test_sets).enumerate() {
            let preds = forward(params, &test.images())?;
            let labels = test.labels();
            let predicted: Vec<usize> = preds.iter().map(|p| p.predicted_class).collect();
            let probs: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probabilities).collect();
            let rec = per_class_recall(&predicted, &labels, Label::ALL.len());
            let auc = auroc_ovr(&probs, &labels, Label::ALL.len())?;
            for label in Label::ALL {
                let c = label.index();
                match rec[c] {
                    Some(r) => recalls[c].push(r),
                    None => log::warn!(
                        "model {} fold {fold}: no {label} samples, fold excluded for that outcome",
                        entry.model_id
                    ),
                }
                if let Some(a) = auc[c] {
                    aurocs[c].push(a);
                }
            }
        }
        for label in Label::ALL {
            let c = label.index();
            rows.push(OutcomeRow {
                model_id: entry.model_id.clone(),
                outcome: label,
                accuracy: aggregate_folds(&recalls[c]).ok().map(|(m, _)| m),
                auroc: aggregate_folds(&aurocs[c]).ok().map(|(m, _)| m),
                folds_used: recalls[c].len(),
            });
        }
    }
    Ok(OutcomeReport { rows })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.3}", 100.0 * v))
}

impl OutcomeReport {
    /// Fixed-width table grouped by model, one row per outcome.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("# Acc. = per-class recall (sensitivity), AUROC = one-vs-rest; both in percent, mean over folds\n");
        writeln!(
            out,
            "{:<16} {:<10} {:>8} {:>8}",
            "Model", "Outcome", "Acc.", "AUROC"
        )
        .unwrap();
        out.push_str(&"-".repeat(45));
        out.push('\n');
        let mut last: Option<&str> = None;
        for row in &self.rows {
            let model = if last == Some(row.model_id.as_str()) {
                ""
            } else {
                if last.is_some() {
                    out.push_str(&"-".repeat(45));
                    out.push('\n');
                }
                row.model_id.as_str()
            };
            last = Some(row.model_id.as_str());
            writeln!(
                out,
                "{:<16} {:<10} {:>8} {:>8}",
                model,
                row.outcome.name(),
                pct(row.accuracy),
                pct(row.auroc)
            )
            .unwrap();
        }
        out
    }

    /// `model_id,outcome,accuracy,auroc` with the same percent values as the table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id,outcome,accuracy,auroc\n");
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{},{}",
                row.model_id,
                row.outcome.name(),
                pct(row.accuracy),
                pct(row.auroc)
            )
            .unwrap();
        }
        out
    }
}
