//! JSON run configuration. Every field has a default and unknown keys are
//! rejected.

use std::path::Path;

use tssc_core::engine::EngineConfig;

use crate::error::{Result, TsscError};
use crate::io::{read_file, write_file};

pub fn parse_config(text: &[u8], origin: &Path) -> Result<EngineConfig> {
    let cfg: EngineConfig = serde_json::from_slice(text).map_err(|e| TsscError::Config {
        path: origin.to_path_buf(),
        msg: e.to_string(),
    })?;
    cfg.validate().map_err(|e| TsscError::Config {
        path: origin.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(cfg)
}

/// The configuration at `path`, or the defaults.
pub fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    match path {
        Some(p) => parse_config(&read_file(p)?, p),
        None => Ok(EngineConfig::default()),
    }
}

pub fn save_config(cfg: &EngineConfig, path: &Path) -> Result<()> {
    write_file(path, &serde_json::to_vec_pretty(cfg).expect("config serializes"))
}
