use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sampling::SamplingSpec;
use crate::diffusion::DiffusionSchedule;
use crate::error::{domain, io_err, Error, Result};
use crate::market::PTParams;
use crate::rl::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub final_step_noise: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            beta_min: 0.1,
            beta_max: 0.5,
            final_step_noise: false,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        let mut s = DiffusionSchedule::build(self.steps, self.beta_min, self.beta_max)?;
        s.final_step_noise = self.final_step_noise;
        Ok(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsConfig {
    /// Upper end of every reward coordinate; derived from the sampling ranges
    /// when absent.
    pub r_cap: Option<f64>,
}

/// Everything one experiment cell needs, read from a JSON file whose missing
/// keys fall back to the built-in defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sampling: SamplingSpec,
    pub pt: PTParams,
    pub diffusion: DiffusionConfig,
    pub bounds: BoundsConfig,
    pub trainer: TrainerConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.pt.validate()?;
        self.diffusion.schedule()?;
        self.trainer.validate()?;
        if let Some(c) = self.bounds.r_cap {
            if !(c > 0.0 && c.is_finite()) {
                return Err(domain(format!("bounds.r_cap must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn r_cap(&self) -> f64 {
        self.bounds.r_cap.unwrap_or_else(|| self.sampling.reward_cap())
    }
}
