//! The fixed-order filtering pipeline: caption, merge identical consecutive
//! captions, drop keyword hits, drop low CLAP scores. Every dropped record
//! lands in a named drop counter so input = output + drops always holds.

use std::collections::BTreeMap;

use crate::config::FilterConfig;
use crate::error::{MinerError, Result};
use crate::intervals::GapSegment;
use crate::manifest::{
    CaptionSource, ManifestRecord, FLAG_CAPTION_ERROR, FLAG_CLAP_LOW, FLAG_KEYWORD_DROPPED,
    FLAG_MERGED, FLAG_UNSCORED,
};
use crate::providers::{Captioner, ClapScorer};

#[derive(Debug, Clone, Default)]
pub struct DropCounters {
    counts: BTreeMap<String, usize>,
}

impl DropCounters {
    pub fn bump(&mut self, stage: &str) {
        *self.counts.entry(stage.to_string()).or_insert(0) += 1;
    }

    pub fn bump_by(&mut self, stage: &str, n: usize) {
        *self.counts.entry(stage.to_string()).or_insert(0) += n;
    }

    pub fn get(&self, stage: &str) -> usize {
        self.counts.get(stage).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &usize)> {
        self.counts.iter()
    }
}

/// Dropped records by stage, plus everything needed to reconcile counts.
#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub input_segments: usize,
    pub output_records: usize,
    pub drops: DropCounters,
    pub warnings: Vec<String>,
}

impl PipelineReport {
    /// input = output + sum(drops).
    pub fn reconciles(&self) -> bool {
        self.input_segments == self.output_records + self.drops.total()
    }
}

/// Caption every segment in order. Provider failures flag and drop the
/// record but never abort the batch.
pub fn caption_segments(
    segments: &[GapSegment],
    captioner: &mut dyn Captioner,
    report: &mut PipelineReport,
) -> Vec<ManifestRecord> {
    let source = if captioner.is_external() { CaptionSource::External } else { CaptionSource::Stub };
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments {
        match captioner.caption(seg) {
            Ok(caption) => out.push(ManifestRecord {
                video_id: seg.video_id.clone(),
                start_ms: seg.start_ms,
                end_ms: seg.end_ms,
                caption,
                caption_source: source,
                clap_score: None,
                flags: vec![],
            }),
            Err(e) => {
                report.warnings.push(format!(
                    "caption failed for {}:{}-{}: {e} ({FLAG_CAPTION_ERROR})",
                    seg.video_id, seg.start_ms, seg.end_ms
                ));
                report.drops.bump(FLAG_CAPTION_ERROR);
            }
        }
    }
    out
}

/// Merge temporally adjacent records (end == next start, same video) whose
/// captions are byte-identical; applied transitively. Records must arrive
/// sorted by (video_id, start_ms).
pub fn merge_identical_captions(
    records: Vec<ManifestRecord>,
    report: &mut PipelineReport,
) -> Vec<ManifestRecord> {
    let mut out: Vec<ManifestRecord> = Vec::with_capacity(records.len());
    for rec in records {
        match out.last_mut() {
            Some(prev)
                if prev.video_id == rec.video_id
                    && prev.end_ms == rec.start_ms
                    && prev.caption == rec.caption =>
            {
                prev.end_ms = rec.end_ms;
                prev.add_flag(FLAG_MERGED);
                report.drops.bump(FLAG_MERGED);
            }
            _ => out.push(rec),
        }
    }
    out
}

fn caption_words(caption: &str) -> impl Iterator<Item = String> + '_ {
    caption
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Drop records whose caption contains any banned word (case-insensitive,
/// word boundaries).
pub fn keyword_filter(
    records: Vec<ManifestRecord>,
    cfg: &FilterConfig,
    report: &mut PipelineReport,
) -> Vec<ManifestRecord> {
    records
        .into_iter()
        .filter(|r| {
            let banned = caption_words(&r.caption).any(|w| cfg.banned_keywords.contains(&w));
            if banned {
                report.drops.bump(FLAG_KEYWORD_DROPPED);
            }
            !banned
        })
        .collect()
}

/// Score and keep records at or above the threshold (the strictly lower ones
/// are the removals). Records the scorer cannot handle are kept but flagged
/// when `allow_unscored`, otherwise the stage fails.
pub fn clap_filter(
    records: Vec<ManifestRecord>,
    scorer: &mut dyn ClapScorer,
    cfg: &FilterConfig,
    allow_unscored: bool,
    report: &mut PipelineReport,
) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::with_capacity(records.len());
    let mut missing = 0usize;
    for mut rec in records {
        if rec.clap_score.is_none() && !rec.has_flag(FLAG_UNSCORED) {
            let seg = GapSegment {
                video_id: rec.video_id.clone(),
                start_ms: rec.start_ms,
                end_ms: rec.end_ms,
            };
            match scorer.score(&seg, &rec.caption) {
                Ok(s) => rec.clap_score = Some(s),
                Err(e) => {
                    if !allow_unscored {
                        missing += 1;
                        continue;
                    }
                    report.warnings.push(format!(
                        "score failed for {}:{}-{}: {e}",
                        rec.video_id, rec.start_ms, rec.end_ms
                    ));
                    rec.add_flag(FLAG_UNSCORED);
                }
            }
        }
        match rec.clap_score {
            Some(s) if s < cfg.clap_threshold => report.drops.bump(FLAG_CLAP_LOW),
            _ => out.push(rec),
        }
    }
    if missing > 0 {
        return Err(MinerError::MissingScores { count: missing });
    }
    Ok(out)
}

/// The full post-extraction chain over capped segments.
pub fn run_filter_chain(
    segments: Vec<GapSegment>,
    captioner: &mut dyn Captioner,
    scorer: &mut dyn ClapScorer,
    cfg: &FilterConfig,
    allow_unscored: bool,
) -> Result<(Vec<ManifestRecord>, PipelineReport)> {
    let mut report = PipelineReport { input_segments: segments.len(), ..Default::default() };
    let records = caption_segments(&segments, captioner, &mut report);
    let records = merge_identical_captions(records, &mut report);
    let records = keyword_filter(records, cfg, &mut report);
    let records = clap_filter(records, scorer, cfg, allow_unscored, &mut report)?;
    report.output_records = records.len();
    debug_assert!(report.reconciles());
    Ok((records, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{StubCaptioner, StubScorer};
    use std::collections::BTreeMap;

    fn seg(video: &str, start: u64, end: u64) -> GapSegment {
        GapSegment { video_id: video.into(), start_ms: start, end_ms: end }
    }

    fn rec(video: &str, start: u64, end: u64, caption: &str) -> ManifestRecord {
        ManifestRecord {
            video_id: video.into(),
            start_ms: start,
            end_ms: end,
            caption: caption.into(),
            caption_source: CaptionSource::Stub,
            clap_score: None,
            flags: vec![],
        }
    }

    #[test]
    fn merge_requires_adjacency_and_identity() {
        let mut report = PipelineReport::default();
        let merged = merge_identical_captions(
            vec![rec("v", 0, 10_000, "rain"), rec("v", 10_000, 20_000, "rain")],
            &mut report,
        );
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].end_ms, 20_000);
        assert!(merged[0].has_flag(FLAG_MERGED));
        assert_eq!(report.drops.get(FLAG_MERGED), 1);

        let mut report = PipelineReport::default();
        let gap = merge_identical_captions(
            vec![rec("v", 0, 10_000, "rain"), rec("v", 12_000, 20_000, "rain")],
            &mut report,
        );
        assert_eq!(gap.len(), 2);

        let mut report = PipelineReport::default();
        let other_video = merge_identical_captions(
            vec![rec("a", 0, 10_000, "rain"), rec("b", 10_000, 20_000, "rain")],
            &mut report,
        );
        assert_eq!(other_video.len(), 2);
    }

    #[test]
    fn merge_chains_transitively() {
        let mut report = PipelineReport::default();
        let merged = merge_identical_captions(
            vec![
                rec("v", 0, 10_000, "rain"),
                rec("v", 10_000, 20_000, "rain"),
                rec("v", 20_000, 30_000, "rain"),
            ],
            &mut report,
        );
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].start_ms, 0);
        assert_eq!(merged[0].end_ms, 30_000);
        assert_eq!(report.drops.get(FLAG_MERGED), 2);
    }

    #[test]
    fn merge_is_idempotent() {
        let mut r1 = PipelineReport::default();
        let once = merge_identical_captions(
            vec![rec("v", 0, 10_000, "rain"), rec("v", 10_000, 20_000, "rain")],
            &mut r1,
        );
        let mut r2 = PipelineReport::default();
        let twice = merge_identical_captions(once.clone(), &mut r2);
        assert_eq!(once, twice);
        assert_eq!(r2.drops.total(), 0);
    }

    #[test]
    fn keyword_filter_matches_words_not_substrings() {
        let cfg = FilterConfig::default();
        let mut report = PipelineReport::default();
        let kept = keyword_filter(
            vec![
                rec("v", 0, 5000, "a man talking in a room"),
                rec("v", 5000, 9000, "wind blowing through trees"),
                rec("v", 9000, 12000, "Singing birds"),
            ],
            &cfg,
            &mut report,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].caption, "wind blowing through trees");
        assert_eq!(report.drops.get(FLAG_KEYWORD_DROPPED), 2);
    }

    #[test]
    fn keyword_filter_is_idempotent() {
        let cfg = FilterConfig::default();
        let mut r1 = PipelineReport::default();
        let once = keyword_filter(vec![rec("v", 0, 5000, "waves crashing")], &cfg, &mut r1);
        let mut r2 = PipelineReport::default();
        let twice = keyword_filter(once.clone(), &cfg, &mut r2);
        assert_eq!(once, twice);
        assert_eq!(r2.drops.total(), 0);
    }

    #[test]
    fn clap_threshold_boundary() {
        let cfg = FilterConfig::default();
        let mut table = BTreeMap::new();
        table.insert("v:0:5000".to_string(), 0.09);
        table.insert("v:5000:9000".to_string(), 0.10);
        let mut scorer = StubScorer { table, default_score: None };
        let mut report = PipelineReport::default();
        let kept = clap_filter(
            vec![rec("v", 0, 5000, "x"), rec("v", 5000, 9000, "y")],
            &mut scorer,
            &cfg,
            false,
            &mut report,
        )
        .unwrap();
        // 0.09 dropped (strictly below), 0.10 kept (boundary stays).
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].clap_score, Some(0.10));
        assert_eq!(report.drops.get(FLAG_CLAP_LOW), 1);
    }

    #[test]
    fn missing_score_without_flag_is_hard_error() {
        let cfg = FilterConfig::default();
        let mut scorer = StubScorer { table: BTreeMap::new(), default_score: None };
        let mut report = PipelineReport::default();
        let err = clap_filter(vec![rec("v", 0, 5000, "x")], &mut scorer, &cfg, false, &mut report)
            .unwrap_err();
        assert!(matches!(err, MinerError::MissingScores { count: 1 }));
    }

    #[test]
    fn missing_score_with_flag_keeps_and_flags() {
        let cfg = FilterConfig::default();
        let mut scorer = StubScorer { table: BTreeMap::new(), default_score: None };
        let mut report = PipelineReport::default();
        let kept = clap_filter(vec![rec("v", 0, 5000, "x")], &mut scorer, &cfg, true, &mut report)
            .unwrap();
        assert_eq!(kept.len(), 1);
        assert!(kept[0].has_flag(FLAG_UNSCORED));
    }

    #[test]
    fn caption_errors_flagged_and_counted_batch_continues() {
        let mut table = BTreeMap::new();
        table.insert("v:0:5000".to_string(), "rain".to_string());
        // v:5000:9000 missing -> provider error.
        table.insert("v:9000:12000".to_string(), "wind".to_string());
        let mut captioner = StubCaptioner::from_table(table);
        let mut report = PipelineReport::default();
        let records = caption_segments(
            &[seg("v", 0, 5000), seg("v", 5000, 9000), seg("v", 9000, 12000)],
            &mut captioner,
            &mut report,
        );
        // Order preserved, failure dropped and counted.
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].caption, "rain");
        assert_eq!(records[1].caption, "wind");
        assert_eq!(report.drops.get(FLAG_CAPTION_ERROR), 1);
    }

    #[test]
    fn full_chain_reconciles() {
        let mut table = BTreeMap::new();
        table.insert("v:0:10000".to_string(), "rain".to_string());
        table.insert("v:10000:20000".to_string(), "rain".to_string());
        table.insert("v:20000:25000".to_string(), "a man talking".to_string());
        table.insert("v:30000:40000".to_string(), "waves".to_string());
        let mut captioner = StubCaptioner::from_table(table);
        let mut scores = BTreeMap::new();
        scores.insert("v:0:20000".to_string(), 0.5); // merged span
        scores.insert("v:30000:40000".to_string(), 0.05);
        let mut scorer = StubScorer { table: scores, default_score: None };
        let cfg = FilterConfig::default();
        let segments = vec![
            seg("v", 0, 10_000),
            seg("v", 10_000, 20_000),
            seg("v", 20_000, 25_000),
            seg("v", 30_000, 40_000),
        ];
        let (records, report) =
            run_filter_chain(segments, &mut captioner, &mut scorer, &cfg, false).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].caption, "rain");
        assert_eq!(report.input_segments, 4);
        assert!(report.reconciles(), "{report:?}");
        assert_eq!(report.drops.get(FLAG_MERGED), 1);
        assert_eq!(report.drops.get(FLAG_KEYWORD_DROPPED), 1);
        assert_eq!(report.drops.get(FLAG_CLAP_LOW), 1);
    }
}
