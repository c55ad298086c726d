//! Run configuration: one TOML file with a section per module. Every field
//! has a default, and the fully resolved config is echoed into each run's
//! output directory.

use std::path::{Path, PathBuf};

use choreo_core::metrics::EvalConfig;
use choreo_core::pipeline::PipelineConfig;
use choreo_core::synth::SyntheticSpec;
use choreo_models::mct::MctConfig;
use choreo_models::mkrvq::RvqConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SyntheticSpec,
    pub pipeline: PipelineConfig,
    pub rvq: RvqConfig,
    pub mct: MctConfig,
    pub generate: GenerateConfig,
    pub metrics: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: PathsConfig::default(),
            synth: SyntheticSpec::default(),
            pipeline: PipelineConfig::default(),
            rvq: RvqConfig::default(),
            mct: MctConfig::default(),
            generate: GenerateConfig::default(),
            metrics: EvalConfig::default(),
        }
    }
}

/// Fallback inputs for commands whose flags are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub rvq_checkpoint: Option<PathBuf>,
    pub mct_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    /// Refuse to generate without a music file.
    pub require_music: bool,
    /// Output frame rate when no frame-aligned condition fixes it.
    pub fps: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            require_music: true,
            fps: 10.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Validation(format!("config echo: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.rvq.validate()?;
        self.mct.validate()?;
        self.pipeline.slicing.validate()?;
        self.pipeline.smoothing.validate()?;
        if !(self.generate.fps > 0.0) {
            return Err(CliError::Validation(format!("generate.fps {} must be positive", self.generate.fps)));
        }
        Ok(())
    }
}
