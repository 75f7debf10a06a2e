//! Engine configuration file (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tidyloop_core::pose_synthesis::SynthesisConfig;
use tidyloop_core::session::LoopConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, data_dir: "tidyloop-data".into() }
    }
}

/// Settings for remote calls that are not secrets; endpoint, key and model
/// come from the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self { temperature: 0.0, timeout_secs: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub backend: BackendKind,
    pub embedder: EmbedderKind,
    pub seed: u64,
    pub loop_budget: usize,
    pub prompt_ceiling: usize,
    pub retries: usize,
    pub token_budget: usize,
    pub synthesis: SynthesisConfig,
    pub remote: RemoteConfig,
    pub server: ServerConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let l = LoopConfig::default();
        Self {
            backend: BackendKind::Mock,
            embedder: EmbedderKind::Hashed,
            seed: 0,
            loop_budget: l.budget,
            prompt_ceiling: l.prompt_ceiling,
            retries: l.retries,
            token_budget: l.token_budget,
            synthesis: l.synthesis,
            remote: RemoteConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::new("InvalidConfig", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.loop_budget == 0 {
            return Err(CliError::new("InvalidConfig", "loop_budget must be positive"));
        }
        self.synthesis.validate().map_err(|e| CliError::new("InvalidConfig", e.to_string()))
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            budget: self.loop_budget,
            synthesis: self.synthesis.with_seed(self.seed),
            prompt_ceiling: self.prompt_ceiling,
            retries: self.retries,
            token_budget: self.token_budget,
        }
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
