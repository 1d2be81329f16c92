//! Norm-ball projections and projected gradient descent over input perturbations.
//!
//! One search routine serves three purposes: the inner maximization of
//! adversarial training, evaluation attacks, and the two contrastive
//! optimizations (loss maximized or minimized inside an L2 ball).

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Network, Prediction};
use crate::seed::{derive_seed, derived_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Maximize,
    Minimize,
}

pub const EVAL_STEPS: usize = 40;
pub const TRAIN_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub num_steps: usize,
    /// `None` selects `2.5 · epsilon / num_steps`.
    pub step_size: Option<f64>,
    pub num_restarts: usize,
    pub random_start: bool,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::L2,
            epsilon: 1.0,
            num_steps: EVAL_STEPS,
            step_size: None,
            num_restarts: 1,
            random_start: false,
            objective: Objective::Maximize,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn l2(epsilon: f64, num_steps: usize) -> Self {
        Self {
            epsilon,
            num_steps,
            ..Self::default()
        }
    }

    pub fn linf(epsilon: f64, num_steps: usize) -> Self {
        Self {
            norm: Norm::Linf,
            epsilon,
            num_steps,
            ..Self::default()
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn with_objective(&self, objective: Objective) -> Self {
        Self {
            objective,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        if self.num_restarts == 0 {
            return Err(Error::Config("num_restarts must be at least 1".into()));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!(
                    "step_size must be positive, got {a}"
                )));
            }
        }
        Ok(())
    }

    pub fn effective_step_size(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon / self.num_steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub delta: Array2<f64>,
    pub achieved_loss: f64,
    pub prediction_before: Prediction,
    pub prediction_after: Prediction,
    pub config_used: AttackConfig,
}

impl Perturbation {
    pub fn norm(&self, norm: Norm) -> f64 {
        norm_of(&self.delta, norm)
    }

    /// The perturbed image `clip(x + delta)`.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        clip_add(x, &self.delta)
    }
}

pub fn norm_of(delta: &Array2<f64>, norm: Norm) -> f64 {
    match norm {
        Norm::L2 => delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
        Norm::Linf => delta.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

/// Nearest point of the closed `norm` ball of radius `epsilon`.
///
/// Points already inside are returned unchanged, so the map is idempotent.
pub fn project(delta: &Array2<f64>, norm: Norm, epsilon: f64) -> Array2<f64> {
    match norm {
        Norm::Linf => delta.mapv(|v| v.clamp(-epsilon, epsilon)),
        Norm::L2 => {
            let n = norm_of(delta, Norm::L2);
            if n <= epsilon {
                return delta.clone();
            }
            let mut scale = epsilon / n;
            loop {
                let out = delta.mapv(|v| v * scale);
                // rounding can leave the rescaled norm an ulp above epsilon
                if norm_of(&out, Norm::L2) <= epsilon {
                    return out;
                }
                scale *= 1.0 - f64::EPSILON;
            }
        }
    }
}

/// `clip(x + delta, 0, 1)`.
pub fn clip_add(x: &Array2<f64>, delta: &Array2<f64>) -> Array2<f64> {
    let mut out = x + delta;
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

fn step_direction(grad: &Array2<f64>, norm: Norm) -> Option<Array2<f64>> {
    match norm {
        Norm::L2 => {
            let n = norm_of(grad, Norm::L2);
            (n > 0.0).then(|| grad.mapv(|g| g / n))
        }
        Norm::Linf => {
            let dir = grad.mapv(|g| {
                if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            dir.iter().any(|&v| v != 0.0).then_some(dir)
        }
    }
}

fn random_in_ball<R: Rng>(
    rng: &mut R,
    dim: (usize, usize),
    norm: Norm,
    epsilon: f64,
) -> Array2<f64> {
    match norm {
        Norm::Linf => Array2::from_shape_simple_fn(dim, || rng.random_range(-epsilon..=epsilon)),
        Norm::L2 => {
            let dir = Array2::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
            let n = norm_of(&dir, Norm::L2);
            if n == 0.0 {
                return Array2::zeros(dim);
            }
            let d = (dim.0 * dim.1) as f64;
            let radius = epsilon * rng.random::<f64>().powf(1.0 / d);
            project(&dir.mapv(|v| v * radius / n), Norm::L2, epsilon)
        }
    }
}

/// Best point found by [`pgd_search`].
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Effective perturbation `x_adv - x`.
    pub delta: Array2<f64>,
    pub x_adv: Array2<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Projected gradient search over `x_adv = clip(x + delta)` with `delta` in the
/// configured ball.
///
/// `evaluate(x_adv, need_grad)` returns the objective value and, when asked,
/// its gradient with respect to `x_adv`. Every visited point competes for the
/// optimum: each restart's starting point, every iterate, the zero
/// perturbation, and the projected `extra_candidates`. Ties keep the earliest
/// point.
pub fn pgd_search<F>(
    x: &Array2<f64>,
    config: &AttackConfig,
    extra_candidates: &[Array2<f64>],
    mut evaluate: F,
) -> Result<SearchOutcome>
where
    F: FnMut(&Array2<f64>, bool) -> Result<(f64, Option<Array2<f64>>)>,
{
    config.validate()?;
    let sign = match config.objective {
        Objective::Maximize => 1.0,
        Objective::Minimize => -1.0,
    };
    let alpha = config.effective_step_size();
    let mut best: Option<SearchOutcome> = None;
    let mut evaluations = 0usize;
    let consider = |x_adv: Array2<f64>, value: f64, best: &mut Option<SearchOutcome>| {
        let better = match best {
            None => true,
            Some(b) => sign * value > sign * b.value,
        };
        if better {
            *best = Some(SearchOutcome {
                delta: &x_adv - x,
                x_adv,
                value,
                evaluations: 0,
            });
        }
    };

    let zero = Array2::zeros(x.dim());
    let restarts = if config.random_start && config.epsilon > 0.0 {
        config.num_restarts
    } else {
        1
    };
    if config.epsilon == 0.0 {
        let (value, _) = evaluate(x, false)?;
        return Ok(SearchOutcome {
            delta: zero,
            x_adv: x.clone(),
            value,
            evaluations: 1,
        });
    }
    if config.random_start {
        let (value, _) = evaluate(x, false)?;
        evaluations += 1;
        consider(x.clone(), value, &mut best);
    }

    for restart in 0..restarts {
        let start = if config.random_start {
            let mut rng = derived_rng(config.seed, &format!("restart/{restart}"));
            random_in_ball(&mut rng, x.dim(), config.norm, config.epsilon)
        } else {
            zero.clone()
        };
        let mut x_adv = clip_add(x, &project(&start, config.norm, config.epsilon));
        for step in 0..=config.num_steps {
            let need_grad = step < config.num_steps;
            let (value, grad) = evaluate(&x_adv, need_grad)?;
            evaluations += 1;
            consider(x_adv.clone(), value, &mut best);
            if !need_grad {
                break;
            }
            let grad = grad.expect("gradient requested");
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Attack {
                    step,
                    message: "non-finite input gradient".into(),
                });
            }
            // a flat point stays flat: later iterates would repeat this one
            let Some(dir) = step_direction(&grad, config.norm) else {
                break;
            };
            let mut delta = &x_adv - x;
            Zip::from(&mut delta)
                .and(&dir)
                .for_each(|d, &g| *d += sign * alpha * g);
            x_adv = clip_add(x, &project(&delta, config.norm, config.epsilon));
        }
    }

    for cand in extra_candidates {
        if cand.dim() != x.dim() {
            return Err(Error::Input(
                "candidate perturbation has wrong shape".into(),
            ));
        }
        let x_adv = clip_add(x, &project(cand, config.norm, config.epsilon));
        let (value, _) = evaluate(&x_adv, false)?;
        evaluations += 1;
        consider(x_adv, value, &mut best);
    }

    let mut out = best.expect("at least one point evaluated");
    out.evaluations = evaluations;
    Ok(out)
}

/// Result of [`pgd_traced`]: the optimum plus the first visited point that
/// changed the predicted class away from the label.
#[derive(Debug, Clone)]
pub struct TracedPerturbation {
    pub perturbation: Perturbation,
    pub first_flip: Option<Array2<f64>>,
}

fn check_pixels(x: &Array2<f64>) -> Result<()> {
    if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Input("pixel values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// PGD on the true-label cross-entropy, also reporting any label flip seen
/// along the way. `extra_candidates` are perturbations (for instance from a
/// smaller radius) that compete with the search iterates.
pub fn pgd_traced(
    params: &ModelParams,
    x: &Array2<f64>,
    y: usize,
    config: &AttackConfig,
    extra_candidates: &[Array2<f64>],
) -> Result<TracedPerturbation> {
    check_pixels(x)?;
    let net = Network::new(params);
    let (_, prediction_before, _) = net.loss_and_input_grad(x, y)?;
    let mut first_flip: Option<Array2<f64>> = None;
    let outcome = pgd_search(x, config, extra_candidates, |x_adv, need_grad| {
        let (value, pred, grad) = if need_grad {
            let (l, p, g) = net.loss_and_input_grad(x_adv, y)?;
            (l, p, Some(g))
        } else {
            let p = Prediction::from_logits(net.logits(x_adv)?);
            (crate::model::cross_entropy(&p.logits, y), p, None)
        };
        if first_flip.is_none() && pred.predicted_class != y {
            first_flip = Some(x_adv - x);
        }
        Ok((value, grad))
    })?;
    let prediction_after = Prediction::from_logits(net.logits(&outcome.x_adv)?);
    Ok(TracedPerturbation {
        perturbation: Perturbation {
            delta: outcome.delta,
            achieved_loss: outcome.value,
            prediction_before,
            prediction_after,
            config_used: config.clone(),
        },
        first_flip,
    })
}

pub fn pgd(
    params: &ModelParams,
    x: &Array2<f64>,
    y: usize,
    config: &AttackConfig,
) -> Result<Perturbation> {
    pgd_traced(params, x, y, config, &[]).map(|t| t.perturbation)
}

/// Seed used for a sample inside [`attack_batch`]; keyed by the sample's
/// identity so results do not depend on batch order.
pub fn sample_seed(base: u64, sample: &Sample) -> u64 {
    derive_seed(
        base,
        &format!("sample/{}/{}", sample.video_id, sample.frame_index),
    )
}

pub fn attack_batch(
    params: &ModelParams,
    samples: &[Sample],
    config: &AttackConfig,
) -> Result<Vec<Perturbation>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = config.with_seed(sample_seed(config.seed, s));
            pgd(params, &s.image, s.label.index(), &cfg).map_err(|e| match e {
                Error::Attack { step, message } => Error::Attack {
                    step,
                    message: format!("sample {i}: {message}"),
                },
                other => other,
            })
        })
        .collect()
}
