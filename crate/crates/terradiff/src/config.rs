//! Single TOML configuration document binding every module's typed config.
//! Unknown keys are rejected so typos never pass silently.

use crate::error::{Error, Result};
use crate::tiler::NoiseMode;
use crate::train::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    /// Number of inference steps (uniform sub-sequence of the schedule).
    pub steps: usize,
    pub eta: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings { steps: crate::schedule::DEFAULT_DDIM_STEPS, eta: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSettings {
    /// Generation window edge in output pixels.
    pub window: usize,
    pub noise_mode: NoiseMode,
    pub seed: u64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings { window: 256, noise_mode: NoiseMode::SharedAll, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    /// Declared resolution levels of the corpus, m/pixel.
    pub resolution_levels: Vec<f64>,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings { resolution_levels: vec![64.0, 16.0, 4.0] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSettings,
    pub generation: GenerationSettings,
    pub data: DataSettings,
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if self.sampler.steps == 0 || self.sampler.steps > self.model.schedule.t_max {
            return Err(Error::InvalidConfig("sampler steps must be in 1..=T".into()));
        }
        if !(0.0..=1.0).contains(&self.sampler.eta) {
            return Err(Error::InvalidConfig("eta must be in [0, 1]".into()));
        }
        if self.generation.window == 0 || self.generation.window % (2 * self.model.upscale) != 0 {
            return Err(Error::InvalidConfig("generation window must be a positive multiple of 2N".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(format!("serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("parse config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Short stable digest of the serialized config, used in run-directory
    /// names.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let text = self.to_toml()?;
        Ok(hex::encode(&Sha256::digest(text.as_bytes())[..6]))
    }
}
