//! Directory-level mining driver: transcripts + durations in, manifest out.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::config::FilterConfig;
use crate::error::{MinerError, Result};
use crate::intervals::{cap_segments, gap_segments, transcribed_union, GapSegment};
use crate::manifest::{ManifestRecord, FLAG_UNKNOWN_DURATION};
use crate::pipeline::{run_filter_chain, PipelineReport};
use crate::providers::{Captioner, ClapScorer};
use crate::stats::{compute_stats, StatsReport};
use crate::subtitle::{parse_srt, parse_vtt};

/// `video_id,duration_ms` rows; a header row is tolerated.
pub fn load_durations(path: &Path) -> Result<BTreeMap<String, u64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() < 2 {
            return Err(MinerError::Config(format!(
                "durations row {} needs video_id,duration_ms",
                i + 1
            )));
        }
        let id = row[0].trim().to_string();
        match row[1].trim().parse::<u64>() {
            Ok(ms) => {
                out.insert(id, ms);
            }
            Err(_) if i == 0 => continue, // header row
            Err(e) => {
                return Err(MinerError::Config(format!("durations row {}: {e}", i + 1)));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct ExtractOutput {
    pub segments: Vec<GapSegment>,
    /// Videos whose duration fell back to the last cue end.
    pub unknown_duration: BTreeSet<String>,
    pub warnings: Vec<String>,
    pub files_parsed: usize,
}

/// Parse every `.vtt`/`.srt` under `dir` (sorted for determinism), compute
/// gap segments, and cap them.
pub fn extract_segments(
    dir: &Path,
    durations: &BTreeMap<String, u64>,
    cfg: &FilterConfig,
) -> Result<ExtractOutput> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("vtt") | Some("srt")
            )
        })
        .collect();
    paths.sort();

    let mut out = ExtractOutput::default();
    for path in paths {
        let video_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| MinerError::Config(format!("bad file name {}", path.display())))?
            .to_string();
        let bytes = std::fs::read(&path)?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("vtt") => parse_vtt(&bytes)?,
            _ => parse_srt(&bytes)?,
        };
        out.files_parsed += 1;
        for w in parsed.warnings {
            out.warnings.push(format!("{video_id}: {w}"));
        }
        let union = transcribed_union(&parsed.cues);
        let duration = durations.get(&video_id).copied();
        if duration.is_none() {
            out.unknown_duration.insert(video_id.clone());
        }
        let gaps = gap_segments(&union, &video_id, duration, cfg);
        out.segments.extend(cap_segments(&gaps, cfg));
    }
    Ok(out)
}

#[derive(Debug)]
pub struct MineOutput {
    pub records: Vec<ManifestRecord>,
    pub report: PipelineReport,
    pub stats: StatsReport,
    pub warnings: Vec<String>,
}

/// The full mine pass over a transcript directory.
pub fn mine(
    transcripts: &Path,
    durations: &BTreeMap<String, u64>,
    cfg: &FilterConfig,
    captioner: &mut dyn Captioner,
    scorer: &mut dyn ClapScorer,
    allow_unscored: bool,
) -> Result<MineOutput> {
    cfg.validate()?;
    let extracted = extract_segments(transcripts, durations, cfg)?;
    let (mut records, mut report) =
        run_filter_chain(extracted.segments, captioner, scorer, cfg, allow_unscored)?;
    for r in records.iter_mut() {
        if extracted.unknown_duration.contains(&r.video_id) {
            r.add_flag(FLAG_UNKNOWN_DURATION);
        }
    }
    let stats = compute_stats(&records);
    report.warnings.extend(extracted.warnings.iter().cloned());
    Ok(MineOutput { records, report, stats, warnings: extracted.warnings })
}
