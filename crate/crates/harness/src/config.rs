//! JSON run configs and runtime strategy selection.

use std::fs;
use std::path::Path;

use midm_core::midm::MidmConfig;
use midm_core::registry::{DEFAULT_ENCODER, DEFAULT_MODEL};

use crate::error::{io_err, HarnessError, Result};

pub const SEED_ENV: &str = "MIDM_SEED";

/// Parses a run config; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<MidmConfig> {
    let cfg: MidmConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Replaces the seed with the value of `MIDM_SEED`, if set.
pub fn apply_seed_override(cfg: &mut MidmConfig, value: Option<&str>) -> Result<()> {
    if let Some(v) = value {
        cfg.seed = v.trim().parse().map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<MidmConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut cfg = parse_config(&text).map_err(|e| match e {
        HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    apply_seed_override(&mut cfg, std::env::var(SEED_ENV).ok().as_deref())?;
    Ok(cfg)
}

pub fn config_json(cfg: &MidmConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serialises")
}

/// Which registered model fitter and encoder to use, and the codec factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Strategies {
    pub model: String,
    pub encoder: String,
    pub factor: usize,
}

impl Default for Strategies {
    fn default() -> Self {
        Self { model: DEFAULT_MODEL.into(), encoder: DEFAULT_ENCODER.into(), factor: 4 }
    }
}
