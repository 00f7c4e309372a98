//! Run configuration file: one JSON document with optional `model`,
//! `train`, `data` and `eval` sections. Missing sections and fields take
//! their defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::GenConfig;
use crate::hand_model::RescaleTarget;
use crate::model::ModelConfig;
use crate::train_eval::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Rescale predicted hands toward the training mean scale.
    pub rescale: bool,
    /// Scale statistics JSON written by `scale-stats`.
    pub scale_stats: Option<PathBuf>,
    pub target: RescaleTarget,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GenConfig,
    pub eval: EvalSection,
}

impl RunConfigFile {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let invalid = |message: String| ConfigError::Invalid { path: path.to_path_buf(), message };
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.model.validate().map_err(|e| invalid(e.to_string()))?;
        cfg.train.validate().map_err(|e| invalid(e.to_string()))?;
        cfg.data.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text, path)
    }

    /// Defaults, or the file at `path` when given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
