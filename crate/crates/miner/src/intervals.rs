//! Interval algebra: union of transcribed spans, complement gaps, and the
//! 10-second capping pass.

use serde::{Deserialize, Serialize};

use crate::config::FilterConfig;
use crate::subtitle::TranscriptCue;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapSegment {
    pub video_id: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl GapSegment {
    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }
}

/// Merged, sorted union of all cue intervals. Touching intervals merge.
pub fn transcribed_union(cues: &[TranscriptCue]) -> Vec<(u64, u64)> {
    let mut spans: Vec<(u64, u64)> = cues.iter().map(|c| (c.start_ms, c.end_ms)).collect();
    spans.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match out.last_mut() {
            Some((_, le)) if s <= *le => *le = (*le).max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Complement intervals of length strictly greater than `min_len_ms`, in
/// temporal order. `duration_ms = None` falls back to the last cue end (the
/// caller should flag downstream records).
pub fn gap_segments(
    union: &[(u64, u64)],
    video_id: &str,
    duration_ms: Option<u64>,
    cfg: &FilterConfig,
) -> Vec<GapSegment> {
    let duration = match duration_ms {
        Some(d) => d,
        None => match union.last() {
            Some(&(_, e)) => e,
            None => return Vec::new(),
        },
    };
    let mut gaps = Vec::new();
    let mut cursor = 0u64;
    for &(s, e) in union {
        let s = s.min(duration);
        let e = e.min(duration);
        if s > cursor {
            gaps.push((cursor, s));
        }
        cursor = cursor.max(e);
    }
    if cursor < duration {
        gaps.push((cursor, duration));
    }
    gaps.into_iter()
        .filter(|(s, e)| e - s > cfg.min_len_ms)
        .map(|(s, e)| GapSegment { video_id: video_id.to_string(), start_ms: s, end_ms: e })
        .collect()
}

/// Split each gap into consecutive `max_len_ms` windows from its start; a
/// trailing remainder survives only if strictly longer than `min_len_ms`.
pub fn cap_segments(gaps: &[GapSegment], cfg: &FilterConfig) -> Vec<GapSegment> {
    let mut out = Vec::new();
    for gap in gaps {
        let mut start = gap.start_ms;
        while start + cfg.max_len_ms <= gap.end_ms {
            out.push(GapSegment {
                video_id: gap.video_id.clone(),
                start_ms: start,
                end_ms: start + cfg.max_len_ms,
            });
            start += cfg.max_len_ms;
        }
        if gap.end_ms > start && gap.end_ms - start > cfg.min_len_ms {
            out.push(GapSegment { video_id: gap.video_id.clone(), start_ms: start, end_ms: gap.end_ms });
        }
    }
    out
}
