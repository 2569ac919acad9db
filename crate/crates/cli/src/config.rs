//! Config-file loading: TOML with nested sections mapping one-to-one onto
//! the trainer configuration, plus CLI/env overrides.

use anyhow::{Context, Result};
use std::path::Path;
use vsm_core::trainer::{Precision, TrainConfig};

/// Parse a config file and apply overrides: `--seed` wins over the file, and
/// `VSM_PRECISION={f32,f64}` wins over the file's precision.
pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let mut cfg: TrainConfig = toml::from_str(&text)
        .with_context(|| format!("config file {} does not parse", path.display()))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    if let Ok(p) = std::env::var("VSM_PRECISION") {
        cfg.precision = match p.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => anyhow::bail!("VSM_PRECISION must be f32 or f64, got {other}"),
        };
    }
    cfg.validate()
        .map_err(|e| anyhow::anyhow!("config file {}: {e}", path.display()))?;
    Ok(cfg)
}
