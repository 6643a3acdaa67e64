//! Mono audio clips.

pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform, samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0);
        Self { samples, sample_rate }
    }

    pub fn silence(duration_s: f64, sample_rate: u32) -> Self {
        let n = (duration_s * sample_rate as f64).round() as usize;
        Self::new(vec![0.0; n], sample_rate)
    }

    /// Pure sine at `freq` Hz with the given amplitude.
    pub fn sine(freq: f64, duration_s: f64, amplitude: f32, sample_rate: u32) -> Self {
        let n = (duration_s * sample_rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| {
                (amplitude as f64 * (2.0 * std::f64::consts::PI * freq * i as f64
                    / sample_rate as f64)
                    .sin()) as f32
            })
            .collect();
        Self::new(samples, sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (sum / self.samples.len() as f64).sqrt()
    }

    /// Linear resampling. Output length is round(n * target / source).
    pub fn resample(&self, target_rate: u32) -> AudioClip {
        if target_rate == self.sample_rate {
            return self.clone();
        }
        let n = self.samples.len();
        let out_len =
            ((n as f64) * target_rate as f64 / self.sample_rate as f64).round() as usize;
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = pos.floor() as usize;
                let frac = pos - lo as f64;
                let a = self.samples.get(lo).copied().unwrap_or(0.0) as f64;
                let b = self.samples.get(lo + 1).copied().unwrap_or(a as f32) as f64;
                (a + (b - a) * frac) as f32
            })
            .collect();
        AudioClip::new(samples, target_rate)
    }

    /// Zero-pad or truncate to an exact sample count.
    pub fn pad_or_trim(&self, target_len: usize) -> AudioClip {
        let mut samples = self.samples.clone();
        samples.resize(target_len, 0.0);
        AudioClip::new(samples, self.sample_rate)
    }

    /// Samples in [start_ms, end_ms) at this clip's rate.
    pub fn slice_ms(&self, start_ms: u64, end_ms: u64) -> AudioClip {
        let to_idx = |ms: u64| ((ms as f64 / 1000.0) * self.sample_rate as f64).round() as usize;
        let lo = to_idx(start_ms).min(self.samples.len());
        let hi = to_idx(end_ms).min(self.samples.len());
        AudioClip::new(self.samples[lo..hi].to_vec(), self.sample_rate)
    }
}
