//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use hyperkg::eval::TiePolicy;
use hyperkg::model::{Activation, ModelConfig};
use hyperkg::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for `{key}`: {reason}")]
    Value {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error(transparent)]
    Invalid(#[from] hyperkg::Error),
}

/// Everything a run needs. Every field has a default.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tie_policy: TiePolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tie_policy: TiePolicy::Optimistic,
        }
    }
}

/// Recognised keys in the order they are written out.
pub const KEYS: &[&str] = &[
    "dataset_dir",
    "output_dir",
    "entity_dim",
    "relation_dim",
    "filter_length",
    "num_filters",
    "hypernetwork",
    "batchnorm",
    "activation",
    "input_dropout",
    "feature_map_dropout",
    "hidden_dropout",
    "label_smoothing",
    "learning_rate",
    "lr_decay",
    "batch_size",
    "epochs",
    "seed",
    "valid_every",
    "tie_policy",
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

impl RunConfig {
    /// Parses config text. `#` starts a comment; blank lines are ignored.
    /// Relative paths are kept as written; see [`RunConfig::resolve_paths`].
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_owned(),
                });
            }
            if !seen.insert(key.to_owned()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_owned(),
                });
            }
            cfg.set(key, value).map_err(|reason| ConfigError::Value {
                line,
                key: key.to_owned(),
                value: value.to_owned(),
                reason,
            })?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "dataset_dir" => self.dataset_dir = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "entity_dim" => m.entity_dim = num(v)?,
            "relation_dim" => m.relation_dim = num(v)?,
            "filter_length" => m.filter_length = num(v)?,
            "num_filters" => m.num_filters = num(v)?,
            "hypernetwork" => m.hypernetwork = parse_bool(v)?,
            "batchnorm" => m.batchnorm = parse_bool(v)?,
            "activation" => m.activation = v.parse::<Activation>().map_err(|e| e.to_string())?,
            "input_dropout" => m.input_dropout = num(v)?,
            "feature_map_dropout" => m.feature_map_dropout = num(v)?,
            "hidden_dropout" => m.hidden_dropout = num(v)?,
            "label_smoothing" => t.label_smoothing = num(v)?,
            "learning_rate" => t.learning_rate = num(v)?,
            "lr_decay" => t.lr_decay = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "epochs" => t.epochs = num(v)?,
            "seed" => t.seed = num(v)?,
            "valid_every" => t.valid_every = num(v)?,
            "tie_policy" => self.tie_policy = v.parse::<TiePolicy>().map_err(|e| e.to_string())?,
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let mut cfg =
            RunConfig::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative dataset and output paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.dataset_dir, &mut self.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Every key with its current value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let values: Vec<String> = vec![
            self.dataset_dir.display().to_string(),
            self.output_dir.display().to_string(),
            m.entity_dim.to_string(),
            m.relation_dim.to_string(),
            m.filter_length.to_string(),
            m.num_filters.to_string(),
            m.hypernetwork.to_string(),
            m.batchnorm.to_string(),
            m.activation.name().to_string(),
            fmt_f64(m.input_dropout),
            fmt_f64(m.feature_map_dropout),
            fmt_f64(m.hidden_dropout),
            fmt_f64(t.label_smoothing),
            fmt_f64(t.learning_rate),
            fmt_f64(t.lr_decay),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.seed.to_string(),
            t.valid_every.to_string(),
            self.tie_policy.name().to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// The model block embedded in checkpoints: the model keys only.
pub fn model_to_text(m: &ModelConfig) -> String {
    let cfg = RunConfig {
        model: m.clone(),
        ..RunConfig::default()
    };
    cfg.to_text()
        .lines()
        .filter(|l| MODEL_KEYS.iter().any(|k| l.starts_with(&format!("{k} "))))
        .map(|l| format!("{l}\n"))
        .collect()
}

const MODEL_KEYS: &[&str] = &[
    "entity_dim",
    "relation_dim",
    "filter_length",
    "num_filters",
    "hypernetwork",
    "batchnorm",
    "activation",
    "input_dropout",
    "feature_map_dropout",
    "hidden_dropout",
];

pub fn model_from_text(text: &str) -> Result<ModelConfig, ConfigError> {
    for (i, l) in text.lines().enumerate() {
        let key = l.split('=').next().unwrap_or("").trim();
        if !key.is_empty() && !MODEL_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line: i + 1,
                key: key.to_owned(),
            });
        }
    }
    Ok(RunConfig::parse(text)?.model)
}
