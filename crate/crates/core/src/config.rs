//! Run configuration: one TOML document with a section per subsystem.
//! Missing keys take their defaults; unknown keys are rejected with their path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{OptimizerConfig, SeedConfig, SequenceConfig, WarmupConfig};
use crate::model::ModelConfig;
use crate::moe::MoeConfig;
use crate::proxy::ProxyParams;
use crate::supervision::LossConfig;
use crate::teacher::TeacherConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub moe: MoeConfig,
    pub proxy: ProxyParams,
    pub teacher: TeacherConfig,
    pub loss: LossConfig,
    pub sequence: SequenceConfig,
    pub optimizer: OptimizerConfig,
    pub seeds: SeedConfig,
    pub warmup: WarmupConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.moe.validate()?;
        self.proxy.validate()?;
        self.teacher.validate()?;
        self.loss.validate()?;
        self.sequence.validate()?;
        self.optimizer.adam().validate()?;
        self.warmup.validate()?;
        let m = 1 << self.model.encoder_blocks;
        let s = &self.sequence.scene;
        if s.height % m != 0 || s.width % m != 0 {
            return Err(Error::Config(format!(
                "sequence.scene size {}x{} must be a multiple of {m}",
                s.height, s.width
            )));
        }
        if s.max_disparity > self.model.max_disparity as f64 {
            return Err(Error::Config(
                "sequence.scene.max_disparity exceeds model.max_disparity".into(),
            ));
        }
        Ok(())
    }

    /// Serializes the fully resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        Error::Config(format!("{path}: {}", inner.trim()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}
