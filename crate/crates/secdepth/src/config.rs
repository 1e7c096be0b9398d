//! Run configuration files.

use std::fmt;
use std::path::{Path, PathBuf};

use secdepth_core::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Environment variable overriding `train.seed`.
pub const SEED_ENV: &str = "SECDEPTH_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    /// Training dataset directory.
    pub dataset: PathBuf,
    /// Dataset scored into the metric columns of the CSV.
    #[serde(default)]
    pub eval_dataset: Option<PathBuf>,
    /// Steps between CSV rows.
    #[serde(default = "one")]
    pub log_interval: u64,
    /// Steps between metric evaluations; 0 scores only the final step.
    #[serde(default)]
    pub eval_interval: u64,
    /// Steps between checkpoints; the final step is always checkpointed.
    #[serde(default = "hundred")]
    pub checkpoint_interval: u64,
}

fn one() -> u64 {
    1
}

fn hundred() -> u64 {
    100
}

/// One problem with one field of a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io { path: PathBuf, source: std::io::Error },
    Fields(Vec<FieldError>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::Fields(errs) => {
                write!(f, "invalid config ({} problem{})", errs.len(), if errs.len() == 1 { "" } else { "s" })?;
                errs.iter().try_for_each(|e| write!(f, "\n  {e}"))
            }
        }
    }
}

impl std::error::Error for ConfigError {}

fn field_error(field: impl Into<String>, message: impl fmt::Display) -> FieldError {
    FieldError { field: field.into(), message: message.to_string() }
}

/// Deserializes `{key: value}` into `T` alone so each key fails on its own.
fn probe<T: for<'de> Deserialize<'de>>(prefix: &str, obj: &Map<String, Value>, errs: &mut Vec<FieldError>) {
    for (k, v) in obj {
        let single = Value::Object(Map::from_iter([(k.clone(), v.clone())]));
        if let Err(e) = serde_json::from_value::<T>(single) {
            errs.push(field_error(format!("{prefix}{k}"), e));
        }
    }
}

/// Schema-only view of [`RunConfig`] with every field optional, for probing.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(dead_code)]
struct RunProbe {
    train: Option<Value>,
    dataset: Option<PathBuf>,
    eval_dataset: Option<Option<PathBuf>>,
    log_interval: Option<u64>,
    eval_interval: Option<u64>,
    checkpoint_interval: Option<u64>,
}

impl RunConfig {
    /// Parses JSON, reporting every offending field rather than the first.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Fields(vec![field_error("<document>", e)]))?;
        let Value::Object(obj) = &value else {
            return Err(ConfigError::Fields(vec![field_error("<document>", "expected a JSON object")]));
        };
        let mut errs = Vec::new();
        probe::<RunProbe>("", obj, &mut errs);
        if let Some(Value::Object(train)) = obj.get("train") {
            probe::<TrainConfig>("train.", train, &mut errs);
        }
        if !obj.contains_key("dataset") {
            errs.push(field_error("dataset", "missing field"));
        }
        if !errs.is_empty() {
            return Err(ConfigError::Fields(errs));
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| ConfigError::Fields(vec![field_error("<document>", e)]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs: Vec<FieldError> =
            self.train.validate().into_iter().map(|i| field_error(format!("train.{}", i.field), i.message)).collect();
        if self.log_interval == 0 {
            errs.push(field_error("log_interval", "must be positive"));
        }
        if self.checkpoint_interval == 0 {
            errs.push(field_error("checkpoint_interval", "must be positive"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Fields(errs))
        }
    }

    /// Applies [`SEED_ENV`] when set to an integer.
    pub fn apply_env(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(v) = value {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|e| ConfigError::Fields(vec![field_error(SEED_ENV, format!("{v:?}: {e}"))]))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::from_json(r#"{"dataset": "d"}"#).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!((c.log_interval, c.eval_interval, c.checkpoint_interval), (1, 0, 100));
    }

    #[test]
    fn lists_every_bad_field() {
        let text = r#"{
            "dataset": "d",
            "log_interval": -1,
            "colour": 1,
            "train": {"epochs": "x", "bins": 32, "schedule": {"a": 0.05, "zeta": 2}}
        }"#;
        let ConfigError::Fields(errs) = RunConfig::from_json(text).unwrap_err() else { panic!() };
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, ["colour", "log_interval", "train.epochs", "train.schedule"]);
    }

    #[test]
    fn semantic_issues_are_prefixed() {
        let ConfigError::Fields(errs) = RunConfig::from_json(r#"{"dataset": "d", "train": {"epochs": 0}}"#).unwrap_err()
        else {
            panic!()
        };
        assert_eq!(errs[0].field, "train.epochs");
        assert!(RunConfig::from_json("[]").is_err());
        assert!(RunConfig::from_json(r#"{"train": {}}"#).is_err());
    }

    #[test]
    fn env_override() {
        let mut c = RunConfig::from_json(r#"{"dataset": "d"}"#).unwrap();
        c.apply_env(Some("42")).unwrap();
        assert_eq!(c.train.seed, 42);
        c.apply_env(None).unwrap();
        assert_eq!(c.train.seed, 42);
        assert!(c.apply_env(Some("forty")).is_err());
    }
}
