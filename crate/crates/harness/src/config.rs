//! Experiment configuration, loadable from a TOML file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ccfi_core::{
    AdamConfig, CeNormalization, ClassId, EmbeddingFormat, LambdaCadence, LambdaMode, LambdaPolicy, Lifecycle,
    SelectionConfig, Selector, SplitSpec,
};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
    },
    Embeddings {
        path: PathBuf,
        /// Inferred from the file extension when absent.
        #[serde(default)]
        format: Option<EmbeddingFormat>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic {
            classes: 10,
            per_class: 1000,
            dim: 32,
            separation: 10.0,
        }
    }
}

/// Feature extractor in front of the head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExtractorSpec {
    Identity,
    /// Random ReLU layer, fixed for the whole run.
    Dense {
        hidden: usize,
    },
    Passthrough,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self::Dense { hidden: 64 }
    }
}

/// Training method for increments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Fisher exemplars and dynamic lambda.
    Ccfi,
    /// Random exemplars and dynamic lambda.
    RandomExemplar,
    /// New data only, no penalty.
    FineTune,
    /// Old columns frozen; new columns trained on new data and exemplars.
    FrozenHead,
    /// Fisher exemplars and a constant lambda.
    FixedLambda(f64),
}

impl Method {
    pub fn selector(self) -> Selector {
        match self {
            Self::RandomExemplar => Selector::Random,
            _ => Selector::Fisher,
        }
    }

    pub fn uses_exemplars(self) -> bool {
        !matches!(self, Self::FineTune)
    }

    pub fn penalty(self, settings: &LambdaSettings) -> Option<LambdaPolicy> {
        let mode = match self {
            Self::Ccfi | Self::RandomExemplar => LambdaMode::Dynamic,
            Self::FixedLambda(v) => LambdaMode::Fixed(v),
            Self::FineTune | Self::FrozenHead => return None,
        };
        Some(LambdaPolicy {
            mode,
            floor: settings.floor,
            ceiling: settings.ceiling,
            initial: settings.initial,
            cadence: settings.cadence,
        })
    }

    pub fn freezes_old_columns(self) -> bool {
        matches!(self, Self::FrozenHead)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ccfi => write!(f, "ccfi"),
            Self::RandomExemplar => write!(f, "random-exemplar"),
            Self::FineTune => write!(f, "fine-tune"),
            Self::FrozenHead => write!(f, "frozen-head"),
            Self::FixedLambda(v) => write!(f, "fixed-lambda:{v:e}"),
        }
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ccfi" => Ok(Self::Ccfi),
            "random-exemplar" => Ok(Self::RandomExemplar),
            "fine-tune" => Ok(Self::FineTune),
            "frozen-head" => Ok(Self::FrozenHead),
            other => {
                let value = other
                    .strip_prefix("fixed-lambda:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| *v > 0.0 && v.is_finite())
                    .ok_or_else(|| HarnessError::Config(format!("unknown method `{other}`")))?;
                Ok(Self::FixedLambda(value))
            }
        }
    }
}

impl TryFrom<String> for Method {
    type Error = HarnessError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Self {
            train: 0.9,
            validation: 0.05,
            test: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let a = AdamConfig::with_step_size(1e-2);
        Self {
            step_size: a.step_size,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
        }
    }
}

impl From<OptimizerSpec> for AdamConfig {
    fn from(o: OptimizerSpec) -> Self {
        Self {
            step_size: o.step_size,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
        }
    }
}

/// Early stopping on the summed training loss with a hard cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpochBudget {
    pub max_epochs: usize,
    /// Window, in epochs, over which improvement is measured.
    pub patience: usize,
    /// Stop when the loss improved by less than this fraction over the window.
    pub min_relative_improvement: f64,
}

impl Default for EpochBudget {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 10,
            min_relative_improvement: 1e-4,
        }
    }
}

impl EpochBudget {
    /// Whether training should stop after the epochs in `losses`.
    pub fn should_stop(&self, losses: &[f64]) -> bool {
        let n = losses.len();
        if n >= self.max_epochs {
            return true;
        }
        if self.patience == 0 || n <= self.patience {
            return false;
        }
        let before = losses[n - 1 - self.patience];
        let now = losses[n - 1];
        if before <= 0.0 {
            return true;
        }
        (before - now) / before < self.min_relative_improvement
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSettings {
    pub floor: f64,
    pub ceiling: f64,
    pub initial: f64,
    pub cadence: LambdaCadence,
}

impl Default for LambdaSettings {
    fn default() -> Self {
        let p = LambdaPolicy::dynamic();
        Self {
            floor: p.floor,
            ceiling: p.ceiling,
            initial: p.initial,
            cadence: p.cadence,
        }
    }
}

/// Everything that determines a run, given its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub seeds: Vec<u64>,
    pub method: Method,
    pub lifecycle: Lifecycle,
    pub initial_classes: Vec<String>,
    /// Ordered groups of classes, one retrain round per group.
    pub increments: Vec<Vec<String>>,
    pub sample_rate: f64,
    pub min_one_per_class: bool,
    pub batch_size: usize,
    /// Standard deviation of the initial head weights.
    pub init_std: f64,
    pub new_column_std: f64,
    pub append_bias: bool,
    /// Old-class accuracy that counts as recovered in `epochs_to_threshold`.
    pub threshold: f64,
    pub normalization: CeNormalization,
    pub data: DataSource,
    pub extractor: ExtractorSpec,
    pub split: Fractions,
    pub optimizer: OptimizerSpec,
    pub initial_training: EpochBudget,
    pub retraining: EpochBudget,
    pub lambda: LambdaSettings,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            method: Method::Ccfi,
            lifecycle: Lifecycle::Refresh,
            initial_classes: (0..6).map(|i| format!("c{i}")).collect(),
            increments: (6..10).map(|i| vec![format!("c{i}")]).collect(),
            sample_rate: 0.01,
            min_one_per_class: true,
            batch_size: 128,
            init_std: 0.01,
            new_column_std: ccfi_core::NEW_COLUMN_STD,
            append_bias: false,
            threshold: 0.95,
            normalization: CeNormalization::Sum,
            data: DataSource::default(),
            extractor: ExtractorSpec::default(),
            split: Fractions::default(),
            optimizer: OptimizerSpec::default(),
            initial_training: EpochBudget {
                max_epochs: 20,
                ..EpochBudget::default()
            },
            retraining: EpochBudget::default(),
            lambda: LambdaSettings::default(),
        }
    }
}

impl ProtocolSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.initial_classes.is_empty() {
            return bad("initial class list is empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for c in self.initial_classes.iter().chain(self.increments.iter().flatten()) {
            if !seen.insert(c.as_str()) {
                return bad(format!("class `{c}` appears more than once in the schedule"));
            }
        }
        if self.increments.iter().any(Vec::is_empty) {
            return bad("increment groups must be non-empty".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return bad(format!("sample rate {} is outside (0, 1]", self.sample_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.init_std >= 0.0 && self.new_column_std >= 0.0) {
            return bad("initialization deviations must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]".into());
        }
        if !(self.optimizer.step_size > 0.0) {
            return bad("step size must be positive".into());
        }
        if self.initial_training.max_epochs == 0 || self.retraining.max_epochs == 0 {
            return bad("epoch caps must be positive".into());
        }
        if let Some(p) = self.method.penalty(&self.lambda) {
            p.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if let DataSource::Synthetic { classes, .. } = &self.data {
            let known: Vec<String> = (0..*classes).map(|i| format!("c{i}")).collect();
            if let Some(c) = seen.iter().find(|c| !known.iter().any(|k| k == *c)) {
                return bad(format!("class `{c}` is not produced by the synthetic generator"));
            }
        }
        self.split_spec(0)?;
        Ok(())
    }

    pub fn split_spec(&self, seed: u64) -> Result<SplitSpec> {
        Ok(SplitSpec::new(
            self.split.train,
            self.split.validation,
            self.split.test,
            seed,
        )?)
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            rate: self.sample_rate,
            min_one_per_class: self.min_one_per_class,
        }
    }

    pub fn initial_ids(&self) -> Vec<ClassId> {
        self.initial_classes.iter().map(|c| ClassId::new(c.clone())).collect()
    }

    pub fn increment_ids(&self) -> Vec<Vec<ClassId>> {
        self.increments
            .iter()
            .map(|g| g.iter().map(|c| ClassId::new(c.clone())).collect())
            .collect()
    }
}
