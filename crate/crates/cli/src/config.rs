//! Run configuration files.

use std::path::{Path, PathBuf};

use anyhow::Context;
use factr_core::data::{Frequency, SplitSpec};
use factr_core::model::ModelConfig;
use factr_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Invalid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// CSV file; relative paths resolve against the config file.
    pub path: PathBuf,
    /// Sampling interval such as `1h` or `1d`; inferred from timestamps when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<Frequency>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<DatasetConfig>,
    #[serde(default = "SplitSpec::standard_ratio")]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub precision: Precision,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/factr")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            split: SplitSpec::standard_ratio(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            out: default_out(),
            seed: None,
            precision: Precision::default(),
        }
    }
}

/// A parsed configuration plus the keys its file spelled out.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    raw: Value,
    /// Directory that relative paths resolve against.
    pub base: PathBuf,
    pub source: Option<PathBuf>,
}

impl LoadedConfig {
    pub fn defaults() -> Self {
        Self {
            config: RunConfig::default(),
            raw: Value::Object(Default::default()),
            base: PathBuf::from("."),
            source: None,
        }
    }

    /// Whether the file set `path` (dot separated) explicitly.
    pub fn sets(&self, path: &str) -> bool {
        path.split('.')
            .try_fold(&self.raw, |v, key| v.get(key))
            .is_some()
    }

    pub fn dataset_path(&self) -> Option<PathBuf> {
        self.config.dataset.as_ref().map(|d| self.base.join(&d.path))
    }
}

/// Reads a JSON configuration, reporting the key path of any error.
pub fn parse_config(path: &Path) -> anyhow::Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
    let config = parse_config_str(&text).with_context(|| format!("in {}", path.display()))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| Invalid(e.to_string()))?;
    Ok(LoadedConfig {
        config,
        raw,
        base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        source: Some(path.to_path_buf()),
    })
}

pub fn parse_config_str(text: &str) -> anyhow::Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Invalid(inner.to_string())
        } else {
            Invalid(format!("at '{path}': {inner}"))
        }
    })?;
    Ok(config)
}

/// Checks every field that can be checked without touching data.
pub fn validate(config: &RunConfig) -> anyhow::Result<()> {
    config
        .model
        .validate()
        .map_err(|e| Invalid(format!("at 'model': {e}")))?;
    config
        .train
        .validate()
        .map_err(|e| Invalid(format!("at 'train': {e}")))?;
    Ok(())
}
