//! Transcript-gap mining: parse subtitle files, take the untranscribed
//! intervals as candidate ambient-audio segments, caption them through a
//! pluggable provider, and filter by keywords and CLAP score into a
//! JSON-lines manifest with dataset statistics.

pub mod config;
pub mod error;
pub mod intervals;
pub mod manifest;
pub mod mine;
pub mod pipeline;
pub mod providers;
pub mod stats;
pub mod subtitle;

pub use config::FilterConfig;
pub use error::{MinerError, Result};
pub use intervals::{cap_segments, gap_segments, transcribed_union, GapSegment};
pub use manifest::{read_manifest, write_manifest, CaptionSource, ManifestRecord};
pub use mine::{extract_segments, load_durations, mine, MineOutput};
pub use pipeline::{run_filter_chain, PipelineReport};
pub use providers::{Captioner, ClapScorer, StubCaptioner, StubScorer};
pub use stats::{compute_stats, StatsReport};
pub use subtitle::{parse_srt, parse_vtt, ParsedTranscript, TranscriptCue};
