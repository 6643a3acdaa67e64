//! WebVTT and SRT cue parsing.
//!
//! Malformed cues are skipped with a warning, never a crash. Styling tags
//! are stripped from cue text.

use crate::error::{MinerError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptCue {
    pub start_ms: u64,
    pub end_ms: u64,
    pub text: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTranscript {
    pub cues: Vec<TranscriptCue>,
    pub warnings: Vec<String>,
}

/// `HH:MM:SS.mmm` (VTT) or `HH:MM:SS,mmm` (SRT) to milliseconds.
fn parse_timestamp(s: &str, sep: char) -> Option<u64> {
    let s = s.trim();
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return None;
    }
    let (h, m, rest) = (parts[0], parts[1], parts[2]);
    let (sec, ms) = rest.split_once(sep)?;
    if h.is_empty() || m.len() != 2 || sec.len() != 2 || ms.len() != 3 {
        return None;
    }
    let h: u64 = h.parse().ok()?;
    let m: u64 = m.parse().ok()?;
    let sec: u64 = sec.parse().ok()?;
    let ms: u64 = ms.parse().ok()?;
    if m >= 60 || sec >= 60 {
        return None;
    }
    Some(((h * 60 + m) * 60 + sec) * 1000 + ms)
}

/// "start --> end [settings]" line.
fn parse_cue_timing(line: &str, sep: char) -> Option<(u64, u64)> {
    let (lhs, rhs) = line.split_once("-->")?;
    let rhs = rhs.trim().split_whitespace().next()?;
    Some((parse_timestamp(lhs, sep)?, parse_timestamp(rhs, sep)?))
}

/// Remove `<...>` styling/voice tags.
fn strip_tags(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_tag = false;
    for ch in text.chars() {
        match ch {
            '<' => in_tag = true,
            '>' if in_tag => in_tag = false,
            c if !in_tag => out.push(c),
            _ => {}
        }
    }
    out.trim().to_string()
}

fn push_cue(
    out: &mut ParsedTranscript,
    timing: Option<(u64, u64)>,
    text_lines: &[String],
    context: &str,
) {
    let Some((start, end)) = timing else { return };
    if end <= start {
        out.warnings.push(format!("{context}: dropped cue with end <= start ({start} >= {end})"));
        return;
    }
    let text = text_lines.join(" ");
    out.cues.push(TranscriptCue { start_ms: start, end_ms: end, text: strip_tags(&text) });
}

/// Parse a WebVTT file. The header line must start with `WEBVTT`.
pub fn parse_vtt(bytes: &[u8]) -> Result<ParsedTranscript> {
    let text = String::from_utf8_lossy(bytes);
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);
    let mut lines = text.lines();
    let header = loop {
        match lines.next() {
            Some(l) if l.trim().is_empty() => continue,
            Some(l) => break l,
            None => return Ok(ParsedTranscript::default()),
        }
    };
    if !header.trim_start().starts_with("WEBVTT") {
        return Err(MinerError::Format("missing WEBVTT header".into()));
    }

    let mut out = ParsedTranscript::default();
    let mut timing: Option<(u64, u64)> = None;
    let mut text_lines: Vec<String> = Vec::new();
    let mut in_cue = false;
    let mut in_skip_block = false;
    let mut cue_no = 0usize;

    for line in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if in_cue {
                cue_no += 1;
                push_cue(&mut out, timing.take(), &text_lines, &format!("cue {cue_no}"));
                text_lines.clear();
                in_cue = false;
            }
            in_skip_block = false;
            continue;
        }
        if in_skip_block {
            continue;
        }
        if !in_cue
            && (trimmed.starts_with("NOTE") || trimmed.starts_with("STYLE") || trimmed.starts_with("REGION"))
        {
            in_skip_block = true;
            continue;
        }
        if trimmed.contains("-->") {
            if in_cue && timing.is_some() {
                // New timing line without a blank separator: close previous.
                cue_no += 1;
                push_cue(&mut out, timing.take(), &text_lines, &format!("cue {cue_no}"));
                text_lines.clear();
            }
            match parse_cue_timing(trimmed, '.') {
                Some(t) => {
                    timing = Some(t);
                    in_cue = true;
                }
                None => {
                    out.warnings.push(format!("unparseable timing line {trimmed:?}"));
                    in_cue = true; // swallow the cue body
                    timing = None;
                }
            }
            continue;
        }
        if in_cue && timing.is_some() {
            text_lines.push(trimmed.to_string());
        }
        // Otherwise: a cue identifier line; carried no information we keep.
    }
    if in_cue {
        cue_no += 1;
        push_cue(&mut out, timing.take(), &text_lines, &format!("cue {cue_no}"));
    }
    Ok(out)
}

/// Parse an SRT file: index, `HH:MM:SS,mmm --> HH:MM:SS,mmm`, text lines.
pub fn parse_srt(bytes: &[u8]) -> Result<ParsedTranscript> {
    let text = String::from_utf8_lossy(bytes).replace("\r\n", "\n");
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);
    let mut out = ParsedTranscript::default();

    for (block_no, block) in text.split("\n\n").map(str::trim).enumerate() {
        if block.is_empty() {
            continue;
        }
        let mut lines = block.lines();
        let Some(first) = lines.next() else { continue };
        // The index line is optional in the wild; timing may come first.
        let timing_line = if first.contains("-->") { first } else { lines.next().unwrap_or("") };
        match parse_cue_timing(timing_line, ',') {
            Some(t) => {
                let body: Vec<String> = lines.map(|l| l.trim().to_string()).collect();
                push_cue(&mut out, Some(t), &body, &format!("block {}", block_no + 1));
            }
            None => out.warnings.push(format!("block {}: no timing line", block_no + 1)),
        }
    }
    Ok(out)
}
