use std::path::Path;
use std::time::Duration;

use nrkd_core::eval::EvalConfig;
use nrkd_core::extract::ExtractConfig;
use nrkd_core::heatmap::HeatmapConfig;
use nrkd_core::loss::LossConfig;
use nrkd_core::model::ModelConfig;
use nrkd_core::plugin::{PluginSpec, DEFAULT_TIMEOUT};
use nrkd_core::retrieval::RetrievalConfig;
use nrkd_core::synth::SynthConfig;
use nrkd_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PluginConfig {
    /// `name=command`, or `builtin`.
    pub spec: String,
    pub timeout_secs: u64,
}

impl Default for PluginConfig {
    fn default() -> Self {
        Self {
            spec: "builtin".into(),
            timeout_secs: DEFAULT_TIMEOUT.as_secs(),
        }
    }
}

impl PluginConfig {
    pub fn resolve(&self) -> Result<PluginSpec, CliError> {
        let spec = if self.spec.contains('=') {
            PluginSpec::parse(&self.spec)?
        } else {
            PluginSpec::parse(&format!("{0}={0}", self.spec))?
        };
        Ok(spec.with_timeout(Duration::from_secs(self.timeout_secs)))
    }
}

/// Every module's settings. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub jobs: usize,
    pub plugin: PluginConfig,
    pub synth: SynthConfig,
    pub heatmap: HeatmapConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub extract: ExtractConfig,
    pub eval: EvalConfig,
    pub retrieval: RetrievalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}
