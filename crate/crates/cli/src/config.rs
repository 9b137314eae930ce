//! Run configuration: `key = value` lines, `#` comments and `[section]`
//! headers that prefix the keys below them. Every key has a default; keys
//! not in the table are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use pixar_core::corpus::SegmenterConfig;
use pixar_core::evalharness::ClsConfig;
use pixar_core::model::ModelConfig;
use pixar_core::training::Stage2Config;
use pixar_tensor::{OptimizerState, ParamStore, ScheduleConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

/// Non-model keys and their defaults. Optimizer and schedule defaults follow
/// the reference pretraining setup; the model defaults to the tiny preset.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("train.steps", "1000000"),
    ("train.batch_size", "384"),
    ("train.accumulation", "1"),
    ("train.lr_max", "3e-4"),
    ("train.lr_min", "3e-6"),
    ("train.warmup_steps", "2000"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.eps", "1e-8"),
    ("train.weight_decay", "0.01"),
    ("train.checkpoint_every", "1000"),
    ("train.log_every", "50"),
    ("stage2.lambda_m", "1.0"),
    ("stage2.delta", "1e-8"),
    ("stage2.fake_samples_per_seq", "30"),
    ("stage2.steps", "200"),
    // Empty: the final stage-1 learning rate.
    ("stage2.learning_rate", ""),
    ("stage2.batch_size", "384"),
    ("stage2.checkpoint_every", "50"),
    ("data.l_max", "1180"),
    ("data.l_min", "100"),
    ("eval.shots", "0"),
    ("cls.epochs", "20"),
    ("cls.batch_size", "8"),
    ("cls.learning_rate", "3e-4"),
    ("cls.freeze_backbone", "false"),
    ("cls.patience", "5"),
    ("attack.seed", "0"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in ModelConfig::tiny().to_pairs() {
            values.insert(format!("model.{k}"), v);
        }
        Self { values }
    }
}

impl RunConfig {
    /// Defaults overridden by the settings in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            cfg.set(&full, value.trim()).map_err(|e| ConfigError(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(ConfigError(format!("unknown config key `{key}`"))),
        }
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ConfigError(format!("unknown config key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| ConfigError(format!("invalid value `{raw}` for `{key}`")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.raw(key)?.is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let pairs: BTreeMap<String, String> = self
            .values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k.to_string(), v.clone())))
            .collect();
        ModelConfig::from_pairs(&pairs).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn schedule(&self) -> Result<ScheduleConfig> {
        let s = ScheduleConfig {
            warmup_steps: self.get("train.warmup_steps")?,
            total_steps: self.get("train.steps")?,
            lr_max: self.get("train.lr_max")?,
            lr_min: self.get("train.lr_min")?,
        };
        s.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(s)
    }

    /// Fresh AdamW state with the configured hyperparameters.
    pub fn optimizer(&self, params: &ParamStore<f32>, lr: f64) -> Result<OptimizerState<f32>> {
        let mut opt = OptimizerState::new(params, lr);
        opt.beta1 = self.get("train.beta1")?;
        opt.beta2 = self.get("train.beta2")?;
        opt.eps = self.get("train.eps")?;
        opt.weight_decay = self.get("train.weight_decay")?;
        Ok(opt)
    }

    /// Stage-2 settings; `final_stage1_lr` fills an unset learning rate.
    pub fn stage2(&self, final_stage1_lr: f64) -> Result<Stage2Config> {
        let cfg = Stage2Config {
            lambda_m: self.get("stage2.lambda_m")?,
            delta: self.get("stage2.delta")?,
            fake_samples_per_seq: self.get("stage2.fake_samples_per_seq")?,
            steps: self.get("stage2.steps")?,
            learning_rate: self.get_opt("stage2.learning_rate")?.unwrap_or(final_stage1_lr),
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn segmenter(&self) -> Result<SegmenterConfig> {
        let cfg = SegmenterConfig {
            l_max: self.get("data.l_max")?,
            l_min: self.get("data.l_min")?,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn classifier(&self) -> Result<ClsConfig> {
        Ok(ClsConfig {
            epochs: self.get("cls.epochs")?,
            batch_size: self.get("cls.batch_size")?,
            learning_rate: self.get("cls.learning_rate")?,
            freeze_backbone: self.get("cls.freeze_backbone")?,
            patience: self.get("cls.patience")?,
            seed: self.get("seed")?,
        })
    }
}
