//! One-file experiment configuration.
//!
//! A run is fully specified by a TOML file plus a seed: the `[synth]`,
//! `[dcam]`, `[train]` and `[eval]` tables map onto the module configs.
//! Unknown keys are rejected. The resolved config is echoed into the output
//! directory of whichever stage consumed it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::dcam::DcamConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Sentinel ASD reported for degenerate (empty) masks.
    pub asd_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { asd_cap: 100.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub dcam: DcamConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.dcam.validate()?;
        self.train.validate()?;
        if self.eval.asd_cap <= 0.0 {
            return Err(Error::validation("eval.asd_cap must be > 0"));
        }
        Ok(())
    }

    /// Applies one seed to every stage, making the whole pipeline a pure
    /// function of (config file, seed).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.dcam.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Echo the resolved config into an output directory.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Serde(format!("config serialization: {e}")))?;
        std::fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }
}
