//! JSON-lines manifest of mined segments, keys in fixed order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MinerError, Result};

pub const FLAG_MERGED: &str = "merged";
pub const FLAG_CAPTION_ERROR: &str = "caption_error";
pub const FLAG_KEYWORD_DROPPED: &str = "keyword_dropped";
pub const FLAG_CLAP_LOW: &str = "clap_low";
pub const FLAG_UNSCORED: &str = "unscored";
pub const FLAG_UNKNOWN_DURATION: &str = "unknown_duration";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSource {
    External,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub video_id: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub caption: String,
    pub caption_source: CaptionSource,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clap_score: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub flags: Vec<String>,
}

impl ManifestRecord {
    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    pub fn add_flag(&mut self, flag: &str) {
        if !self.has_flag(flag) {
            self.flags.push(flag.to_string());
        }
    }
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| MinerError::Manifest { line: 0, reason: e.to_string() })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| MinerError::Manifest { line: i + 1, reason: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}
