//! Gap extraction against a brute-force boolean-timeline oracle, plus the
//! throughput regression gate.

use aural_miner::config::FilterConfig;
use aural_miner::intervals::{gap_segments, transcribed_union, GapSegment};
use aural_miner::subtitle::{parse_vtt, TranscriptCue};
use proptest::prelude::*;

/// Brute force: paint the timeline at `resolution_ms`, then read runs of
/// untranscribed cells back as gaps and apply the same length threshold.
fn timeline_oracle(
    cues: &[TranscriptCue],
    duration_ms: u64,
    cfg: &FilterConfig,
) -> Vec<(u64, u64)> {
    let res = cfg.resolution_ms;
    let cells = (duration_ms / res) as usize;
    let mut covered = vec![false; cells];
    for cue in cues {
        let lo = (cue.start_ms / res) as usize;
        let hi = ((cue.end_ms.min(duration_ms)) / res) as usize;
        for cell in covered.iter_mut().take(hi).skip(lo) {
            *cell = true;
        }
    }
    let mut gaps = Vec::new();
    let mut start: Option<usize> = None;
    for i in 0..=cells {
        let open = i < cells && !covered[i];
        match (open, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                let (a, b) = (s as u64 * res, i as u64 * res);
                if b - a > cfg.min_len_ms {
                    gaps.push((a, b));
                }
                start = None;
            }
            _ => {}
        }
    }
    gaps
}

fn make_cues(seed: u64, duration_ms: u64, n: usize, res: u64) -> Vec<TranscriptCue> {
    // Deterministic xorshift positions, aligned to the oracle resolution so
    // exact equality is meaningful.
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).max(1);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    (0..n)
        .map(|_| {
            let s = (next() % (duration_ms - res)) / res * res;
            let max_len = (duration_ms - s).min(8_000);
            let len = (next() % max_len.max(res)).max(res) / res * res;
            TranscriptCue { start_ms: s, end_ms: (s + len.max(res)).min(duration_ms), text: "x".into() }
        })
        .collect()
}

#[test]
fn gap_extraction_equals_timeline_oracle_on_200_random_files() {
    let cfg = FilterConfig::default();
    for seed in 0..200u64 {
        let duration = 30_000 + (seed % 7) * 10_000;
        let n_cues = 1 + (seed % 20) as usize;
        let cues = make_cues(seed + 1, duration, n_cues, cfg.resolution_ms);
        let union = transcribed_union(&cues);
        let gaps = gap_segments(&union, "v", Some(duration), &cfg);
        let got: Vec<(u64, u64)> = gaps.iter().map(|g| (g.start_ms, g.end_ms)).collect();
        let expected = timeline_oracle(&cues, duration, &cfg);
        assert_eq!(got, expected, "seed {seed}");
    }
}

#[test]
fn union_and_gaps_tile_the_timeline_exactly() {
    // Pre-threshold complement: union + all gaps == [0, duration], no overlap.
    let cfg = FilterConfig { min_len_ms: 0, ..FilterConfig::default() };
    for seed in 0..50u64 {
        let duration = 60_000;
        let cues = make_cues(seed * 131 + 7, duration, 1000, cfg.resolution_ms);
        let union = transcribed_union(&cues);
        let gaps = gap_segments(&union, "v", Some(duration), &cfg);

        let res = cfg.resolution_ms;
        let cells = (duration / res) as usize;
        let mut paint = vec![0u8; cells];
        for &(s, e) in &union {
            for i in (s / res) as usize..(e.min(duration) / res) as usize {
                paint[i] += 1;
            }
        }
        for g in &gaps {
            for i in (g.start_ms / res) as usize..(g.end_ms / res) as usize {
                paint[i] += 1;
            }
        }
        assert!(paint.iter().all(|&c| c == 1), "seed {seed}: tiling broken");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_equivalence_property(seed in 0u64..10_000, n in 1usize..40) {
        let cfg = FilterConfig::default();
        let cues = make_cues(seed, 45_000, n, cfg.resolution_ms);
        let union = transcribed_union(&cues);
        let gaps = gap_segments(&union, "v", Some(45_000), &cfg);
        let got: Vec<(u64, u64)> = gaps.iter().map(|g| (g.start_ms, g.end_ms)).collect();
        prop_assert_eq!(got, timeline_oracle(&cues, 45_000, &cfg));
    }
}

#[test]
fn parsing_and_gap_extraction_throughput() {
    // Regression gate: >= 10k synthetic transcript files per minute on one
    // core (override with AURAL_MINER_MIN_FILES_PER_MIN).
    let min_per_min: f64 = std::env::var("AURAL_MINER_MIN_FILES_PER_MIN")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(10_000.0);
    let cfg = FilterConfig::default();

    // Build 500 synthetic VTT files with ~20 cues each.
    let files: Vec<String> = (0..500)
        .map(|f| {
            let mut s = String::from("WEBVTT\n\n");
            for c in 0..20 {
                let start = c * 2 + (f % 3) as u64;
                s.push_str(&format!(
                    "00:00:{:02}.000 --> 00:00:{:02}.500\ncue text {c}\n\n",
                    start % 60,
                    (start + 1) % 60
                ));
            }
            s
        })
        .collect();

    let t0 = std::time::Instant::now();
    let mut total_gaps = 0usize;
    for file in &files {
        let parsed = parse_vtt(file.as_bytes()).unwrap();
        let union = transcribed_union(&parsed.cues);
        let gaps = gap_segments(&union, "v", Some(60_000), &cfg);
        total_gaps += gaps.len();
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let per_min = files.len() as f64 / elapsed * 60.0;
    assert!(total_gaps > 0);
    assert!(
        per_min >= min_per_min,
        "throughput {per_min:.0} files/min below gate {min_per_min:.0}"
    );
}

#[test]
fn capped_segments_respect_both_bounds() {
    let cfg = FilterConfig::default();
    for seed in 0..50u64 {
        let cues = make_cues(seed + 3, 90_000, 5, cfg.resolution_ms);
        let union = transcribed_union(&cues);
        let gaps = gap_segments(&union, "v", Some(90_000), &cfg);
        let capped = aural_miner::cap_segments(&gaps, &cfg);
        for seg in &capped {
            assert!(seg.duration_ms() > cfg.min_len_ms, "{seg:?}");
            assert!(seg.duration_ms() <= cfg.max_len_ms, "{seg:?}");
        }
        // Idempotence of the capping pass.
        assert_eq!(aural_miner::cap_segments(&capped, &cfg), capped);
        let _ = GapSegment { video_id: "v".into(), start_ms: 0, end_ms: 2000 };
    }
}
