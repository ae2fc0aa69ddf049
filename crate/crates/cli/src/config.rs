use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsfp_core::losses::ObjectiveConfig;
use tsfp_core::model::ModelConfig;
use tsfp_core::synthetic::SyntheticConfig;
use tsfp_core::training::{AblationMode, TrainConfig};

use crate::CliError;

/// Everything a run can be configured with; one TOML document with a table per section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies command-line overrides, then validates every section.
    pub fn resolve(mut self, seed: Option<u64>, mode: Option<AblationMode>) -> Result<Self, CliError> {
        if let Some(seed) = seed {
            self.data.seed = seed;
            self.train.seed = seed;
        }
        if let Some(mode) = mode {
            self.train.mode = mode;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate().map_err(|e| CliError::Config(format!("data: {e}")))?;
        self.model.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.objective.validate().map_err(|e| CliError::Config(format!("objective: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes to TOML")
    }
}
