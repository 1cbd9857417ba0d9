//! Run configuration: TOML with one section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{FeatureOptions, SamplingPlan, TrainingConfig};
use crate::simulate::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for splits and network initialization.
    pub seed: u64,
    pub simulation: SimConfig,
    pub sampling: SamplingPlan,
    pub features: FeatureOptions,
    pub training: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampling = SamplingPlan::default();
        Self {
            seed: 0,
            simulation: SimConfig::for_grid(sampling.grid_side),
            sampling,
            features: FeatureOptions::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.sampling.validate()?;
        self.features.validate()?;
        self.training.validate()
    }
}
