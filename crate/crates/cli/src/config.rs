//! Run configuration: file format, flag overrides and seed fan-out.
//!
//! Precedence, lowest first: built-in defaults, the JSON config file (or the
//! `config` object of a manifest written by an earlier run), command-line
//! flags. Component seeds are never read from the file; they are derived
//! from the global `seed` as `derive_seed(seed, tag)` with these tags:
//!
//! | component                  | tag                  |
//! |----------------------------|----------------------|
//! | synthetic data             | `synth`              |
//! | fold assignment            | `kfold`              |
//! | model init, fold `f`       | `model/fold={f}`     |
//! | training, fold `f`         | `train/fold={f}`     |
//! | curve attacks              | `curve`              |
//! | explanation attacks        | `explain`            |
//! | explanation sample choice  | `explain/samples`    |

use std::fs;
use std::path::{Path, PathBuf};

use robex::seed::derive_seed;
use robex::{Architecture, AttackConfig, ModelConfig, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Network shape; input size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub architecture: Architecture,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden_units: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let base = ModelConfig::small_cnn(32, 32, 3, 0);
        Self {
            architecture: base.architecture,
            conv1_channels: base.conv1_channels,
            conv2_channels: base.conv2_channels,
            hidden_units: base.hidden_units,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSettings {
    /// Radius of the contrastive searches.
    pub epsilon: f64,
    pub attack: AttackConfig,
    /// Number of test samples explained.
    pub num_samples: usize,
    /// Explain only misclassified samples.
    pub only_errors: bool,
    /// Fold whose best checkpoint and test split are used.
    pub fold: usize,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            attack: AttackConfig::l2(1.0, robex::attacks::EVAL_STEPS),
            num_samples: 8,
            only_errors: false,
            fold: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every component seed derives from it.
    pub seed: u64,
    /// Worker threads for fold- and sample-level parallelism; `None` uses all cores.
    pub jobs: Option<usize>,
    /// Name used in curves and reports; defaults to the run directory name.
    pub model_id: Option<String>,
    /// Dataset in the `<root>/<label>/<video>/<frame>.png` layout. When
    /// absent, data are synthesized from `synth`.
    pub data_root: Option<PathBuf>,
    /// Model input size for `data_root`; synthetic data use the generator size.
    pub input_height: usize,
    pub input_width: usize,
    pub synth: SynthConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub folds: usize,
    /// Run directories consumed by `curve`, `report` and `explain`.
    pub runs: Vec<PathBuf>,
    /// Radius grid for `curve`; must start at 0 and ascend.
    pub epsilons: Vec<f64>,
    /// Attack template for `curve`; its epsilon is replaced by each grid point.
    pub eval_attack: AttackConfig,
    pub explain: ExplainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: None,
            model_id: None,
            data_root: None,
            input_height: 32,
            input_width: 32,
            synth: SynthConfig::default(),
            model: ModelShape::default(),
            train: TrainConfig::default(),
            folds: 5,
            runs: Vec::new(),
            epsilons: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            eval_attack: AttackConfig::l2(1.0, robex::attacks::EVAL_STEPS),
            explain: ExplainSettings::default(),
        }
    }
}

/// Flags that override file values.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub runs: Vec<PathBuf>,
    pub only_errors: bool,
}

#[derive(Deserialize)]
struct ManifestConfig {
    config: RunConfig,
}

impl RunConfig {
    /// Reads a config file, or the resolved config inside a manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let parsed = if value.get("command").is_some() && value.get("config").is_some() {
            serde_json::from_value::<ManifestConfig>(value).map(|m| m.config)
        } else {
            serde_json::from_value::<RunConfig>(value)
        };
        parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies flag overrides and derives component seeds.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self, CliError> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(jobs) = overrides.jobs {
            self.jobs = Some(jobs);
        }
        if !overrides.runs.is_empty() {
            self.runs = overrides.runs.clone();
        }
        if overrides.only_errors {
            self.explain.only_errors = true;
        }
        if self.jobs == Some(0) {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        self.synth.seed = derive_seed(self.seed, "synth");
        self.eval_attack.seed = derive_seed(self.seed, "curve");
        self.explain.attack.seed = derive_seed(self.seed, "explain");
        Ok(self)
    }

    pub fn kfold_seed(&self) -> u64 {
        derive_seed(self.seed, "kfold")
    }

    pub fn sample_choice_seed(&self) -> u64 {
        derive_seed(self.seed, "explain/samples")
    }

    /// Input size of the model: the generator's for synthetic data.
    pub fn input_size(&self) -> (usize, usize) {
        match self.data_root {
            Some(_) => (self.input_height, self.input_width),
            None => (self.synth.height, self.synth.width),
        }
    }

    pub fn model_config(&self, fold: usize) -> ModelConfig {
        let (h, w) = self.input_size();
        ModelConfig {
            architecture: self.model.architecture,
            input_height: h,
            input_width: w,
            num_classes: robex::Label::ALL.len(),
            conv1_channels: self.model.conv1_channels,
            conv2_channels: self.model.conv2_channels,
            hidden_units: self.model.hidden_units,
            seed: derive_seed(self.seed, &format!("model/fold={fold}")),
        }
    }

    pub fn train_config(&self, fold: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &format!("train/fold={fold}")),
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_seeds_fan_out() {
        let cfg = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        let a = cfg.clone().resolve(&Overrides::default()).unwrap();
        let b = cfg
            .resolve(&Overrides {
                seed: Some(2),
                jobs: Some(3),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!(b.seed, 2);
        assert_eq!(b.jobs, Some(3));
        assert_ne!(a.synth.seed, b.synth.seed);
        assert_ne!(a.model_config(0).seed, a.model_config(1).seed);
        assert_ne!(a.train_config(0).seed, a.model_config(0).seed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"folds": 2}"#).unwrap();
        assert_eq!(partial.folds, 2);
        assert_eq!(partial.train, TrainConfig::default());
    }
}
