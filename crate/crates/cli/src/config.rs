//! TOML run configuration shared by `synth-gen` and `train`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tempose_core::data::SynthConfig;
use tempose_core::model::DecoderConfig;
use tempose_core::train::TrainConfig;
use tempose_core::{Error, Result};

/// `[synth]` section: generator settings plus corpus size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSection {
    #[serde(flatten)]
    pub cfg: SynthConfig,
    /// Sequences to generate.
    #[serde(default = "default_num_sequences")]
    pub num_sequences: usize,
}

fn default_num_sequences() -> usize {
    4
}

/// `[train]` section: optimizer settings plus the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(flatten)]
    pub cfg: TrainConfig,
    /// Sequences held out for validation, taken from the end of the corpus.
    #[serde(default = "default_val_sequences")]
    pub val_sequences: usize,
}

fn default_val_sequences() -> usize {
    1
}

/// Whole config file. Each command requires only its own sections.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AppConfig {
    pub synth: Option<SynthSection>,
    pub model: Option<DecoderConfig>,
    pub train: Option<TrainSection>,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidInput {
            op: "config",
            msg: format!("{}: {e}", path.display()),
        })
    }

    pub fn synth(&self) -> Result<&SynthSection> {
        self.synth.as_ref().ok_or(Error::InvalidInput {
            op: "config",
            msg: "missing [synth] section".to_string(),
        })
    }

    pub fn model(&self) -> Result<&DecoderConfig> {
        self.model.as_ref().ok_or(Error::InvalidInput {
            op: "config",
            msg: "missing [model] section".to_string(),
        })
    }

    pub fn train(&self) -> Result<&TrainSection> {
        self.train.as_ref().ok_or(Error::InvalidInput {
            op: "config",
            msg: "missing [train] section".to_string(),
        })
    }
}
