//! Newline-delimited JSON metrics log, one self-contained record per
//! evaluation point.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use vsm_core::trainer::RunMetrics;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    #[serde(flatten)]
    pub metrics: RunMetrics,
}

pub struct MetricsLog {
    file: std::fs::File,
    last_episode: Option<u64>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)
            .with_context(|| format!("cannot create metrics log {}", path.display()))?;
        Ok(MetricsLog {
            file,
            last_episode: None,
        })
    }

    pub fn append(&mut self, metrics: &RunMetrics) -> Result<()> {
        if let Some(last) = self.last_episode {
            debug_assert!(metrics.episode >= last, "episode indices must be monotone");
        }
        self.last_episode = Some(metrics.episode);
        let record = MetricsRecord {
            schema_version: SCHEMA_VERSION,
            metrics: metrics.clone(),
        };
        let line = serde_json::to_string(&record)?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

/// Parse a metrics log, line by line.
pub fn read_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read metrics log {}", path.display()))?;
    text.lines()
        .map(|line| serde_json::from_str(line).context("metrics line does not parse"))
        .collect()
}
