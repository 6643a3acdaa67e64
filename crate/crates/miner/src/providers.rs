//! Pluggable caption and CLAP-score providers.
//!
//! The stub providers serve fixtures (or deterministic synthetic values) so
//! the pipeline runs without any external model. The stdio providers speak
//! line-delimited JSON to a subprocess: one request object per line, one
//! response object per line, with a read timeout.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{channel, Receiver};
use std::time::Duration;

use serde::Deserialize;

use crate::error::{MinerError, Result};
use crate::intervals::GapSegment;

#[derive(Debug)]
pub enum ProviderError {
    Failed(String),
    Timeout,
}

impl std::fmt::Display for ProviderError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProviderError::Failed(msg) => write!(f, "provider failed: {msg}"),
            ProviderError::Timeout => write!(f, "provider timed out"),
        }
    }
}

pub trait Captioner {
    fn caption(&mut self, segment: &GapSegment) -> std::result::Result<String, ProviderError>;
    /// Whether captions come from an external model or a local stub.
    fn is_external(&self) -> bool {
        false
    }
}

pub trait ClapScorer {
    fn score(
        &mut self,
        segment: &GapSegment,
        caption: &str,
    ) -> std::result::Result<f64, ProviderError>;
}

pub fn segment_key(segment: &GapSegment) -> String {
    format!("{}:{}:{}", segment.video_id, segment.start_ms, segment.end_ms)
}

/// Fixture-backed captioner. Without a table entry it synthesizes a
/// deterministic caption from the segment key.
#[derive(Debug, Default, Clone)]
pub struct StubCaptioner {
    pub table: BTreeMap<String, String>,
    /// When true, segments missing from the table report an error instead
    /// of a synthesized caption.
    pub strict: bool,
}

impl StubCaptioner {
    pub fn from_table(table: BTreeMap<String, String>) -> Self {
        Self { table, strict: true }
    }

    pub fn synthetic() -> Self {
        Self::default()
    }
}

const SYNTH_SUBJECTS: [&str; 8] =
    ["rain", "wind", "waves", "traffic", "birds", "a fan", "an engine", "footsteps"];
const SYNTH_VERBS: [&str; 6] = ["falling", "blowing", "humming", "rustling", "passing by", "crashing"];

impl Captioner for StubCaptioner {
    fn caption(&mut self, segment: &GapSegment) -> std::result::Result<String, ProviderError> {
        let key = segment_key(segment);
        if let Some(c) = self.table.get(&key) {
            return Ok(c.clone());
        }
        if self.strict {
            return Err(ProviderError::Failed(format!("no fixture caption for {key}")));
        }
        let mut h = 0xcbf29ce484222325u64;
        for b in key.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let subject = SYNTH_SUBJECTS[(h % 8) as usize];
        let verb = SYNTH_VERBS[((h >> 8) % 6) as usize];
        Ok(format!("{subject} {verb}"))
    }
}

/// Fixture-backed scorer; missing entries surface as provider failures.
#[derive(Debug, Default, Clone)]
pub struct StubScorer {
    pub table: BTreeMap<String, f64>,
    /// Score assigned when no fixture exists (None = fail).
    pub default_score: Option<f64>,
}

impl ClapScorer for StubScorer {
    fn score(
        &mut self,
        segment: &GapSegment,
        _caption: &str,
    ) -> std::result::Result<f64, ProviderError> {
        let key = segment_key(segment);
        match (self.table.get(&key), self.default_score) {
            (Some(&s), _) => Ok(s),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(ProviderError::Failed(format!("no fixture score for {key}"))),
        }
    }
}

// ── Stdio subprocess providers ──────────────────────────────────────

struct StdioClient {
    child: Child,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl StdioClient {
    fn spawn(command: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| MinerError::Provider(format!("spawn {command}: {e}")))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { child, lines: rx, timeout })
    }

    fn round_trip(&mut self, request: &serde_json::Value) -> std::result::Result<String, ProviderError> {
        let stdin = self.child.stdin.as_mut().expect("piped stdin");
        writeln!(stdin, "{request}").map_err(|e| ProviderError::Failed(format!("write: {e}")))?;
        stdin.flush().map_err(|e| ProviderError::Failed(format!("flush: {e}")))?;
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(ProviderError::Failed(format!("read: {e}"))),
            Err(_) => Err(ProviderError::Timeout),
        }
    }
}

impl Drop for StdioClient {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Captioner over stdio: `{"op":"caption","video_id":..,"start_ms":..,
/// "end_ms":..}` in, `{"caption": "..."}` or `{"error": "..."}` out.
pub struct StdioCaptioner {
    client: StdioClient,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: Option<String>,
    error: Option<String>,
}

impl StdioCaptioner {
    pub fn spawn(command: &str, args: &[String], timeout: Duration) -> Result<Self> {
        Ok(Self { client: StdioClient::spawn(command, args, timeout)? })
    }
}

impl Captioner for StdioCaptioner {
    fn caption(&mut self, segment: &GapSegment) -> std::result::Result<String, ProviderError> {
        let req = serde_json::json!({
            "op": "caption",
            "video_id": segment.video_id,
            "start_ms": segment.start_ms,
            "end_ms": segment.end_ms,
        });
        let line = self.client.round_trip(&req)?;
        let resp: CaptionResponse = serde_json::from_str(line.trim())
            .map_err(|e| ProviderError::Failed(format!("decode {line:?}: {e}")))?;
        match (resp.caption, resp.error) {
            (Some(c), _) => Ok(c),
            (None, Some(e)) => Err(ProviderError::Failed(e)),
            (None, None) => Err(ProviderError::Failed("response had neither caption nor error".into())),
        }
    }

    fn is_external(&self) -> bool {
        true
    }
}

/// Scorer over stdio: `{"op":"score",...,"caption":...}` in,
/// `{"score": 0.42}` or `{"error": "..."}` out.
pub struct StdioScorer {
    client: StdioClient,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: Option<f64>,
    error: Option<String>,
}

impl StdioScorer {
    pub fn spawn(command: &str, args: &[String], timeout: Duration) -> Result<Self> {
        Ok(Self { client: StdioClient::spawn(command, args, timeout)? })
    }
}

impl ClapScorer for StdioScorer {
    fn score(
        &mut self,
        segment: &GapSegment,
        caption: &str,
    ) -> std::result::Result<f64, ProviderError> {
        let req = serde_json::json!({
            "op": "score",
            "video_id": segment.video_id,
            "start_ms": segment.start_ms,
            "end_ms": segment.end_ms,
            "caption": caption,
        });
        let line = self.client.round_trip(&req)?;
        let resp: ScoreResponse = serde_json::from_str(line.trim())
            .map_err(|e| ProviderError::Failed(format!("decode {line:?}: {e}")))?;
        match (resp.score, resp.error) {
            (Some(s), _) => Ok(s),
            (None, Some(e)) => Err(ProviderError::Failed(e)),
            (None, None) => Err(ProviderError::Failed("response had neither score nor error".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(video: &str, start: u64) -> GapSegment {
        GapSegment { video_id: video.into(), start_ms: start, end_ms: start + 5000 }
    }

    #[test]
    fn stub_captioner_serves_fixtures() {
        let mut table = BTreeMap::new();
        table.insert("v:0:5000".to_string(), "rain on a roof".to_string());
        let mut c = StubCaptioner::from_table(table);
        assert_eq!(c.caption(&seg("v", 0)).unwrap(), "rain on a roof");
        assert!(c.caption(&seg("v", 9000)).is_err());
    }

    #[test]
    fn synthetic_captions_are_deterministic() {
        let mut c = StubCaptioner::synthetic();
        let a = c.caption(&seg("video7", 0)).unwrap();
        let b = c.caption(&seg("video7", 0)).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn stub_scorer_default_and_fixtures() {
        let mut table = BTreeMap::new();
        table.insert("v:0:5000".to_string(), 0.05);
        let mut s = StubScorer { table, default_score: Some(0.5) };
        assert_eq!(s.score(&seg("v", 0), "x").unwrap(), 0.05);
        assert_eq!(s.score(&seg("v", 9000), "x").unwrap(), 0.5);
        let mut strict = StubScorer { table: BTreeMap::new(), default_score: None };
        assert!(strict.score(&seg("v", 0), "x").is_err());
    }
}
