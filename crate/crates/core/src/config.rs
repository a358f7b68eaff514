use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::ModelConfig;
use crate::error::{Error, Result};
use crate::harness::{TaskSpec, TrainConfig};

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains([',', '\n', '/']) {
            return Err(Error::config(format!("invalid run name {:?}", self.name)));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.model.vocab != self.task.vocab {
            return Err(Error::config(format!(
                "model vocab {} differs from task vocab {}",
                self.model.vocab, self.task.vocab
            )));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}
