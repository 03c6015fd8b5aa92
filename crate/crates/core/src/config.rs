//! Pipeline-wide JSON configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classify::ClassifyConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::rigid::AlignConfig;
use crate::synth::SynthConfig;

/// Settings for every pipeline stage. Missing sections take their defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub metrics: MetricsConfig,
    pub align: AlignConfig,
    pub synth: SynthConfig,
    pub classify: ClassifyConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.metrics.validate()?;
        self.align.validate()?;
        self.synth.validate()?;
        self.classify.validate()
    }

    /// Parse and validate.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
