use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajfed_core::fpo::RunConfig;

use crate::CliError;

/// File-level configuration: the run itself plus where and how to write
/// results. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub run: RunConfig,
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Write model checkpoints after training.
    pub checkpoints: bool,
    /// Print JSON instead of text tables.
    pub json: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), checkpoints: true, json: false }
    }
}

impl Default for CliConfig {
    fn default() -> Self {
        Self { run: RunConfig::default(), output: OutputSpec::default() }
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: CliConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.run.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
