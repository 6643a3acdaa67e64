//! Filtering thresholds and the versioned banned-keyword list.

use serde::{Deserialize, Serialize};

use crate::error::{MinerError, Result};

/// Shipped keyword asset; lines starting with `#` are comments.
pub const BANNED_KEYWORDS_V1: &str = include_str!("../assets/banned_keywords.txt");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub min_len_ms: u64,
    pub max_len_ms: u64,
    pub banned_keywords: Vec<String>,
    pub clap_threshold: f64,
    pub resolution_ms: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_len_ms: 1000,
            max_len_ms: 10_000,
            banned_keywords: default_banned_keywords(),
            clap_threshold: 0.1,
            resolution_ms: 10,
        }
    }
}

pub fn default_banned_keywords() -> Vec<String> {
    BANNED_KEYWORDS_V1
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_lowercase())
        .collect()
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len_ms >= self.max_len_ms {
            return Err(MinerError::Config(format!(
                "min_len_ms {} must be below max_len_ms {}",
                self.min_len_ms, self.max_len_ms
            )));
        }
        if self.resolution_ms == 0 {
            return Err(MinerError::Config("resolution_ms must be positive".into()));
        }
        if self.banned_keywords.iter().any(|k| k.split_whitespace().count() != 1) {
            return Err(MinerError::Config("banned keywords must be single words".into()));
        }
        Ok(())
    }
}
