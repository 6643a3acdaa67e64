//! Dataset statistics over a manifest: segments per video, caption word
//! counts, audio durations, and top word frequencies.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::manifest::ManifestRecord;

const STOP_WORDS: [&str; 24] = [
    "a", "an", "the", "and", "or", "of", "in", "on", "at", "to", "is", "are", "as", "by", "with",
    "from", "for", "then", "while", "into", "over", "some", "it", "its",
];

pub const TOP_WORDS: usize = 50;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StatsReport {
    /// segments-per-video count -> number of videos with that count.
    pub segments_per_video: BTreeMap<usize, usize>,
    /// caption word count -> number of records.
    pub caption_word_counts: BTreeMap<usize, usize>,
    /// duration in whole seconds -> number of records.
    pub duration_seconds: BTreeMap<u64, usize>,
    /// Most frequent caption words (stop words removed), descending.
    pub top_words: Vec<(String, usize)>,
    pub n_records: usize,
    pub n_videos: usize,
}

pub fn compute_stats(records: &[ManifestRecord]) -> StatsReport {
    let mut per_video: BTreeMap<&str, usize> = BTreeMap::new();
    let mut word_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut durations: BTreeMap<u64, usize> = BTreeMap::new();
    let mut words: BTreeMap<String, usize> = BTreeMap::new();

    for r in records {
        *per_video.entry(&r.video_id).or_insert(0) += 1;
        let wc = r.caption.split_whitespace().count();
        *word_counts.entry(wc).or_insert(0) += 1;
        *durations.entry(r.duration_ms() / 1000).or_insert(0) += 1;
        for w in r.caption.split(|c: char| !c.is_alphanumeric() && c != '\'') {
            let w = w.to_lowercase();
            if w.is_empty() || STOP_WORDS.contains(&w.as_str()) {
                continue;
            }
            *words.entry(w).or_insert(0) += 1;
        }
    }

    let mut segments_per_video: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, n) in per_video.iter() {
        *segments_per_video.entry(*n).or_insert(0) += 1;
    }

    let mut top: Vec<(String, usize)> = words.into_iter().collect();
    // Descending by count, ties alphabetical for determinism.
    top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    top.truncate(TOP_WORDS);

    StatsReport {
        segments_per_video,
        caption_word_counts: word_counts,
        duration_seconds: durations,
        top_words: top,
        n_records: records.len(),
        n_videos: per_video.len(),
    }
}

impl StatsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, json)?;
        Ok(())
    }

    /// One CSV with a `kind` discriminator column per histogram.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "kind,key,value")?;
        for (k, v) in &self.segments_per_video {
            writeln!(f, "segments_per_video,{k},{v}")?;
        }
        for (k, v) in &self.caption_word_counts {
            writeln!(f, "caption_word_count,{k},{v}")?;
        }
        for (k, v) in &self.duration_seconds {
            writeln!(f, "duration_seconds,{k},{v}")?;
        }
        for (w, n) in &self.top_words {
            writeln!(f, "top_word,{w},{n}")?;
        }
        f.flush()?;
        Ok(())
    }
}
