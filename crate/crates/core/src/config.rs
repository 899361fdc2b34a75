//! TOML run configuration shared by the CLI subcommands. Sections are
//! optional so one file can drive a whole simulate/train/detect workflow;
//! each subcommand checks that the sections it needs are present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::SimSpec;
use crate::error::{Error, Result};
use crate::learn::TrainConfig;
use crate::pipeline::EncodeOptions;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub simulate: Option<SimSpec>,
    pub train: Option<TrainConfig>,
    /// Rare-pattern stage of the detection pipeline.
    pub stage2: Option<TrainConfig>,
    pub encode: Option<EncodeOptions>,
}

/// Parses a config file and returns it with the SHA-256 of its raw bytes,
/// recorded in output metadata for provenance.
pub fn load_config(path: &Path) -> Result<(RunConfig, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::Parse(format!("{}: config is not UTF-8", path.display())))?;
    let cfg: RunConfig = toml::from_str(text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if let Some(sim) = &cfg.simulate {
        sim.validate()?;
    }
    for stage in [&cfg.train, &cfg.stage2] {
        if let Some(rule) = stage.as_ref().and_then(|t| t.threshold.as_ref()) {
            rule.validate()?;
        }
    }
    Ok((cfg, crate::io::sha256_hex(&bytes)))
}

impl RunConfig {
    pub fn require_simulate(&self) -> Result<&SimSpec> {
        self.simulate
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [simulate] section".into()))
    }

    pub fn require_train(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [train] section".into()))
    }

    pub fn require_stage2(&self) -> Result<&TrainConfig> {
        self.stage2
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [stage2] section".into()))
    }
}
