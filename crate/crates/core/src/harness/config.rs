use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::read_json;
use crate::losses::CasConfig;
use crate::synth::ShapesConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cas,
    Ce,
    Cace,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Cas, LossKind::Ce, LossKind::Cace];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cas => "cas",
            LossKind::Ce => "ce",
            LossKind::Cace => "cace",
        }
    }

    /// Whether the loss ignores which class a region belongs to, so output
    /// channels must be aligned to the ground truth before evaluation.
    pub fn is_class_agnostic(self) -> bool {
        !matches!(self, LossKind::Ce)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss {s:?}; expected cas, ce or cace")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ToyImbalance,
    FidelitySweep,
    AlphaSweep,
    Properties,
    TextureMetrics,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::ToyImbalance,
        ExperimentKind::FidelitySweep,
        ExperimentKind::AlphaSweep,
        ExperimentKind::Properties,
        ExperimentKind::TextureMetrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ToyImbalance => "toy-imbalance",
            ExperimentKind::FidelitySweep => "fidelity-sweep",
            ExperimentKind::AlphaSweep => "alpha-sweep",
            ExperimentKind::Properties => "properties",
            ExperimentKind::TextureMetrics => "texture-metrics",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
            Error::InvalidConfig(format!("unknown preset {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Optimisation settings shared by every training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub alpha: f64,
    pub lr: f64,
    pub max_steps: usize,
    /// Images per step; 0 trains on the full set every step.
    pub batch_size: usize,
    pub hidden: usize,
    /// Softmax channels M.
    pub channels: usize,
    /// Steps per early-stopping window; 0 disables early stopping.
    pub early_stop_window: usize,
    pub early_stop_min_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Cas,
            alpha: CasConfig::DEFAULT_ALPHA,
            lr: 1e-3,
            max_steps: 500,
            batch_size: 8,
            hidden: 32,
            channels: 2,
            early_stop_window: 50,
            early_stop_min_improvement: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        CasConfig::new(self.alpha).map_err(|_| Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)))?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        if self.hidden == 0 || self.channels < 2 {
            return Err(Error::InvalidConfig(format!(
                "hidden {} and channels {}; need hidden >= 1 and channels >= 2",
                self.hidden, self.channels
            )));
        }
        if self.loss != LossKind::Cas && self.channels != 2 {
            return Err(Error::InvalidConfig(format!(
                "{} training needs 2 output channels, got {}",
                self.loss, self.channels
            )));
        }
        if !(self.early_stop_min_improvement >= 0.0) {
            return Err(Error::InvalidConfig("early_stop_min_improvement must be >= 0".into()));
        }
        Ok(())
    }

    pub fn cas(&self) -> CasConfig {
        CasConfig::new(self.alpha).expect("validated alpha")
    }
}

/// Settings of the two-cluster imbalance experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub n1: usize,
    pub n2: usize,
    pub variance: f64,
    /// Independent repetitions, each with its own derived seed.
    pub runs: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n1: 10_000,
            n2: 10,
            variance: 0.2,
            runs: 5,
        }
    }
}

/// Fuzzing budgets of the property checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertyConfig {
    pub permutation_cases: usize,
    pub bound_cases: usize,
    pub gradient_cases: usize,
    pub network_gradient_seeds: usize,
    pub grid_step: f64,
    pub sparsity_threshold: f64,
    pub sparsity_min_fraction: f64,
    pub min_mean_distance: f64,
}

impl Default for PropertyConfig {
    fn default() -> Self {
        Self {
            permutation_cases: 200,
            bound_cases: 1000,
            gradient_cases: 50,
            network_gradient_seeds: 20,
            grid_step: 0.01,
            sparsity_threshold: 0.95,
            sparsity_min_fraction: 0.9,
            min_mean_distance: 1.8,
        }
    }
}

/// Everything that determines an experiment's results. Two runs with equal
/// configs produce byte-identical result files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub train: TrainConfig,
    /// Training images, including the validation split.
    pub data: ShapesConfig,
    pub test_count: usize,
    /// Share of the training images held out, with clean labels, for
    /// channel selection.
    pub validation_fraction: f64,
    pub flip_fractions: Vec<f64>,
    pub alphas: Vec<f64>,
    pub losses: Vec<LossKind>,
    pub toy: ToyConfig,
    pub properties: PropertyConfig,
}

impl ExperimentConfig {
    /// The defaults of a preset.
    pub fn preset(kind: ExperimentKind) -> Self {
        // Step budgets come from pilot runs: with inputs scaled to std 1/255
        // the per-pixel network needs ~2000 Adam steps at lr 1e-3 to
        // converge on the shapes data, and ~3000 to saturate under CAS.
        let base = Self {
            experiment: kind,
            seed: 0,
            train: TrainConfig {
                max_steps: 2000,
                ..TrainConfig::default()
            },
            data: ShapesConfig {
                count: 40,
                height: 32,
                width: 32,
                regions_per_image: 2,
                noise_std: 0.1,
            },
            test_count: 20,
            validation_fraction: 0.2,
            flip_fractions: vec![0.0, 0.02, 0.05, 0.10, 0.30, 0.50],
            alphas: vec![0.01, 0.1, 0.3, 0.5, 0.9],
            losses: LossKind::ALL.to_vec(),
            toy: ToyConfig::default(),
            properties: PropertyConfig::default(),
        };
        match kind {
            ExperimentKind::ToyImbalance => Self {
                train: TrainConfig {
                    hidden: 10,
                    batch_size: 0,
                    max_steps: 1000,
                    ..TrainConfig::default()
                },
                losses: vec![LossKind::Ce, LossKind::Cas],
                ..base
            },
            ExperimentKind::Properties => Self {
                train: TrainConfig {
                    max_steps: 3000,
                    ..TrainConfig::default()
                },
                ..base
            },
            ExperimentKind::TextureMetrics => Self {
                train: TrainConfig {
                    channels: 3,
                    ..base.train.clone()
                },
                data: ShapesConfig {
                    regions_per_image: 3,
                    ..base.data
                },
                losses: vec![LossKind::Cas],
                ..base
            },
            ExperimentKind::FidelitySweep | ExperimentKind::AlphaSweep => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        if let Some(f) = self.flip_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::InvalidConfig(format!("flip fraction {f} outside [0, 1]")));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidConfig(format!("alpha {a} outside [0, 1]")));
        }
        if self.losses.is_empty() {
            return Err(Error::InvalidConfig("no losses selected".into()));
        }
        if self.toy.n1 == 0 || self.toy.n2 == 0 || self.toy.runs == 0 {
            return Err(Error::InvalidConfig("toy n1, n2 and runs must be >= 1".into()));
        }
        if !(self.toy.variance >= 0.0 && self.toy.variance.is_finite()) {
            return Err(Error::InvalidConfig(format!("toy variance {}", self.toy.variance)));
        }
        let needs_images = !matches!(self.experiment, ExperimentKind::ToyImbalance);
        if needs_images {
            let validation = self.validation_count();
            if self.data.count < 2 || validation == 0 || validation >= self.data.count || self.test_count == 0 {
                return Err(Error::InvalidConfig(format!(
                    "{} training images with validation fraction {} and {} test images leave an empty split",
                    self.data.count, self.validation_fraction, self.test_count
                )));
            }
        }
        if self.experiment == ExperimentKind::TextureMetrics && self.train.channels < self.data.regions_per_image {
            return Err(Error::InvalidConfig(format!(
                "{} channels cannot separate {} regions",
                self.train.channels, self.data.regions_per_image
            )));
        }
        Ok(())
    }

    /// Number of held-out validation images, at least one.
    pub fn validation_count(&self) -> usize {
        ((self.validation_fraction * self.data.count as f64).round() as usize).max(1)
    }

    /// Builds a config from a preset, an optional JSON file and dotted
    /// `key=value` overrides, applied in that order. The file must name an
    /// experiment when no preset is given; fields it omits keep the preset
    /// defaults.
    pub fn resolve(preset: Option<ExperimentKind>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file_value: Option<Value> = file.map(read_json).transpose()?;
        let from_file = file_value
            .as_ref()
            .and_then(|v| v.get("experiment"))
            .map(|v| serde_json::from_value::<ExperimentKind>(v.clone()))
            .transpose()
            .map_err(|e| Error::InvalidConfig(format!("experiment: {e}")))?;
        let kind = match (preset, from_file) {
            (Some(p), Some(f)) if p != f => {
                return Err(Error::InvalidConfig(format!("preset {p} conflicts with config experiment {f}")));
            }
            (Some(k), _) | (None, Some(k)) => k,
            (None, None) => return Err(Error::InvalidConfig("no preset given and config names no experiment".into())),
        };
        let mut value = serde_json::to_value(Self::preset(kind))?;
        if let Some(f) = file_value {
            merge(&mut value, f);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c=value`. The value is read as JSON when it parses and as a
/// plain string otherwise, so `train.loss=ce` and `seed=3` both work.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for key in path.split('.') {
        let Value::Object(map) = slot else {
            return Err(Error::InvalidConfig(format!("override path {path:?} descends into a non-object")));
        };
        slot = map
            .get_mut(key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config key {path:?}")))?;
    }
    *slot = parsed;
    Ok(())
}
