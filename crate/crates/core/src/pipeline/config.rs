//! Run configuration: a flat TOML document whose missing keys take the
//! defaults below. Unknown keys are rejected.
//!
//! | key                 | default     |
//! |---------------------|-------------|
//! | `w`                 | 21          |
//! | `bins`              | 21          |
//! | `soft`              | true        |
//! | `var_eps`           | 1e-10       |
//! | `lambda`            | 0.01        |
//! | `gamma`             | 0.01        |
//! | `learning_rate`     | 1e-4        |
//! | `iterations`        | 300         |
//! | `beta1`             | 0.9         |
//! | `beta2`             | 0.999       |
//! | `adam_eps`          | 1e-8        |
//! | `seed`              | 0           |
//! | `grad_mode`         | "analytic"  |
//! | `downsample_factor` | 3           |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcconn::{FcConfig, DEFAULT_VAR_EPS};
use crate::objective::{GradMode, LossWeights, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub w: usize,
    pub bins: usize,
    pub soft: bool,
    pub var_eps: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub grad_mode: GradMode,
    pub downsample_factor: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fc = FcConfig::default();
        let w = LossWeights::default();
        let o = OptimizerConfig::default();
        RunConfig {
            w: fc.w,
            bins: fc.bins,
            soft: fc.soft,
            var_eps: DEFAULT_VAR_EPS,
            lambda: w.lambda,
            gamma: w.gamma,
            learning_rate: o.learning_rate,
            iterations: o.iterations,
            beta1: o.beta1,
            beta2: o.beta2,
            adam_eps: o.adam_eps,
            seed: o.seed,
            grad_mode: o.grad_mode,
            downsample_factor: 3,
        }
    }
}

impl RunConfig {
    pub fn fc(&self) -> FcConfig {
        FcConfig { w: self.w, bins: self.bins, soft: self.soft, var_eps: self.var_eps }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, gamma: self.gamma }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            iterations: self.iterations,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            grad_mode: self.grad_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fc().validate()?;
        self.weights().validate()?;
        self.optimizer().validate()?;
        if self.downsample_factor < 1 {
            return Err(Error::InvalidConfig("downsample_factor must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml(&text)
}
