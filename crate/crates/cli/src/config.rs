use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use unravel_core::training::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Standard,
    EffectivePaths,
    StochasticDepth,
}

/// Training config file. `m` is required for `effective_paths`;
/// `survival_final` defaults to 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub regime: Regime,
    pub m: Option<usize>,
    pub survival_final: Option<f64>,
}

const REQUIRED: [&str; 9] = [
    "epochs",
    "batch_size",
    "lr",
    "lr_decay",
    "milestones",
    "momentum",
    "weight_decay",
    "seed",
    "regime",
];
const OPTIONAL: [&str; 2] = ["m", "survival_final"];

fn field<T: serde::de::DeserializeOwned>(obj: &Map<String, Value>, key: &str) -> Result<T, CliError> {
    let v = obj.get(key).cloned().unwrap_or(Value::Null);
    serde_json::from_value(v).map_err(|e| CliError::Validation(format!("config key `{key}`: {e}")))
}

impl RunConfig {
    pub fn from_train_config(cfg: &TrainConfig, regime: Regime) -> Self {
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            lr_decay: cfg.lr_decay,
            milestones: cfg.milestones.clone(),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            seed: cfg.seed,
            regime,
            m: None,
            survival_final: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config is not valid JSON: {e}")))?;
        let Value::Object(obj) = value else {
            return Err(CliError::Validation("config must be a JSON object".into()));
        };
        if let Some(k) = obj.keys().find(|k| !REQUIRED.contains(&k.as_str()) && !OPTIONAL.contains(&k.as_str())) {
            return Err(CliError::Validation(format!("unknown config key `{k}`")));
        }
        if let Some(k) = REQUIRED.iter().find(|k| !obj.contains_key(**k)) {
            return Err(CliError::Validation(format!("missing config key `{k}`")));
        }
        let cfg = Self {
            epochs: field(&obj, "epochs")?,
            batch_size: field(&obj, "batch_size")?,
            lr: field(&obj, "lr")?,
            lr_decay: field(&obj, "lr_decay")?,
            milestones: field(&obj, "milestones")?,
            momentum: field(&obj, "momentum")?,
            weight_decay: field(&obj, "weight_decay")?,
            seed: field(&obj, "seed")?,
            regime: field(&obj, "regime")?,
            m: field(&obj, "m")?,
            survival_final: field(&obj, "survival_final")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay,
            milestones: self.milestones.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn survival_final(&self) -> f64 {
        self.survival_final.unwrap_or(0.5)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config().validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if self.regime == Regime::EffectivePaths && self.m.is_none() {
            return Err(CliError::Validation("config key `m`: required for regime effective_paths".into()));
        }
        if self.m == Some(0) {
            return Err(CliError::Validation("config key `m`: must be at least 1".into()));
        }
        let p = self.survival_final();
        if !(p > 0.0 && p <= 1.0) {
            return Err(CliError::Validation(format!("config key `survival_final`: {p} must be in (0, 1]")));
        }
        Ok(())
    }
}
