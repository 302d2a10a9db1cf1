//! The single TOML run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvConfig;
use crate::grpo::GrpoConfig;
use crate::pipeline::PipelineConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Every section is optional; missing keys take their defaults and unknown keys are errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grpo: GrpoConfig,
    pub env: EnvConfig,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.grpo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pipeline.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }
}
