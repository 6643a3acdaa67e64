//! Mel filterbank and log-mel spectrogram extraction.
//!
//! Mel bins are later treated as channels of a 1D signal, so the frame count
//! is cropped to a multiple of 8 to keep downstream stride-2 stages exact
//! (1001 frames for a 10 s clip become 1000).

use aural_core::Tensor;

use crate::clip::AudioClip;
use crate::error::{AudioError, Result};
use crate::stft::stft;

/// Frames must divide by this for the temporal downsampling stack.
pub const FRAME_MULTIPLE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        // 100 frames per second at 16 kHz; 64 bins matching the VAE input.
        Self {
            n_fft: 1024,
            hop: 160,
            n_mels: 64,
            sample_rate: 16_000,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(AudioError::Format {
                chunk: "mel config".into(),
                reason: format!("hop {} must be in 1..=n_fft {}", self.hop, self.n_fft),
            });
        }
        if self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(AudioError::Format {
                chunk: "mel config".into(),
                reason: format!("fmax {} above Nyquist {}", self.fmax, self.sample_rate / 2),
            });
        }
        Ok(())
    }

    /// Frames a 10 s clip yields after cropping.
    pub fn canonical_frames(&self) -> usize {
        let len = 10 * self.sample_rate as usize;
        let t = crate::stft::n_frames(len, self.n_fft, self.hop);
        t - t % FRAME_MULTIPLE
    }
}

/// Natural-log mel spectrogram, `frames` shaped [T, n_mels].
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.frames.shape()[1]
    }

    /// View as [n_mels, T], the channel layout the VAE consumes.
    pub fn to_channels(&self) -> Tensor {
        self.frames.transposed().expect("rank 2")
    }

    /// Inverse of `to_channels`.
    pub fn from_channels(channels: &Tensor, config: MelConfig) -> Self {
        Self { frames: channels.transposed().expect("rank 2"), config }
    }

    pub fn l1_distance(&self, other: &MelSpectrogram) -> f64 {
        let a = self.frames.data();
        let b = other.frames.data();
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }
}

/// hz -> mel (HTK formula).
fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over one-sided FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Row-major [n_mels, n_bins].
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let n_bins = cfg.n_fft / 2 + 1;
        let mel_lo = hz_to_mel(cfg.fmin);
        let mel_hi = hz_to_mel(cfg.fmax);
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;

        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f <= left || f >= right {
                    0.0
                } else if f <= center {
                    (f - left) / (center - left)
                } else {
                    (right - f) / (right - center)
                };
                weights[m * n_bins + k] = w;
            }
        }
        Self { weights, n_mels: cfg.n_mels, n_bins }
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_mels).map(|m| self.row(m).iter().sum()).collect()
    }

    /// weights . magnitude for one frame.
    pub fn apply(&self, magnitudes: &[f64]) -> Vec<f64> {
        debug_assert_eq!(magnitudes.len(), self.n_bins);
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(magnitudes).map(|(w, v)| w * v).sum())
            .collect()
    }
}

/// log(max(filterbank . |STFT|, floor)), frames cropped to a multiple of 8.
pub fn waveform_to_mel(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if clip.sample_rate != cfg.sample_rate {
        return Err(AudioError::RateMismatch { expected: cfg.sample_rate, got: clip.sample_rate });
    }
    let spec = stft(clip, cfg)?;
    let mags = spec.magnitudes();
    let t_full = mags.len();
    let t = t_full - t_full % FRAME_MULTIPLE;
    if t == 0 {
        return Err(AudioError::InputTooShort(format!(
            "{} frames, need at least {}",
            t_full, FRAME_MULTIPLE
        )));
    }
    let fb = MelFilterbank::new(cfg);
    let mut data = Vec::with_capacity(t * cfg.n_mels);
    for frame in mags.iter().take(t) {
        for v in fb.apply(frame) {
            data.push(v.max(cfg.log_floor).ln());
        }
    }
    let frames = Tensor::new(vec![t, cfg.n_mels], data).expect("mel shape");
    Ok(MelSpectrogram { frames, config: cfg.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::CANONICAL_SAMPLE_RATE;

    #[test]
    fn canonical_clip_yields_1000_by_64() {
        let cfg = MelConfig::default();
        let clip = AudioClip::sine(440.0, 10.0, 0.5, CANONICAL_SAMPLE_RATE);
        let mel = waveform_to_mel(&clip, &cfg).unwrap();
        assert_eq!(mel.frames.shape(), &[1000, 64]);
        assert_eq!(cfg.canonical_frames(), 1000);
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let cfg = MelConfig::default();
        let clip = AudioClip::silence(1.0, CANONICAL_SAMPLE_RATE);
        let mel = waveform_to_mel(&clip, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        for &v in mel.frames.data() {
            assert_eq!(v, floor);
        }
    }

    #[test]
    fn noise_has_more_energy_than_silence() {
        let cfg = MelConfig::default();
        let silence = waveform_to_mel(&AudioClip::silence(1.0, CANONICAL_SAMPLE_RATE), &cfg).unwrap();
        let mut state = 7u64;
        let samples: Vec<f32> = (0..16_000)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64 - 1.0) as f32 * 0.5
            })
            .collect();
        let noise = waveform_to_mel(&AudioClip::new(samples, CANONICAL_SAMPLE_RATE), &cfg).unwrap();
        let t = noise.n_frames();
        for f in 0..t {
            let e_noise: f64 = (0..64).map(|m| noise.frames.get(&[f, m])).sum();
            let e_sil: f64 = (0..64).map(|m| silence.frames.get(&[f, m])).sum();
            assert!(e_noise > e_sil, "frame {f}");
        }
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let cfg = MelConfig::default();
        let clip = AudioClip::silence(1.0, 44_100);
        assert!(matches!(
            waveform_to_mel(&clip, &cfg),
            Err(AudioError::RateMismatch { expected: 16_000, got: 44_100 })
        ));
    }

    #[test]
    fn filterbank_on_ones_equals_row_sums() {
        let cfg = MelConfig::default();
        let fb = MelFilterbank::new(&cfg);
        let ones = vec![1.0; fb.n_bins];
        let applied = fb.apply(&ones);
        let sums = fb.row_sums();
        for (a, s) in applied.iter().zip(&sums) {
            assert!((a - s).abs() < 1e-12);
        }
    }

    #[test]
    fn filterbank_rows_are_triangular_and_positive() {
        let cfg = MelConfig::default();
        let fb = MelFilterbank::new(&cfg);
        for (m, s) in fb.row_sums().iter().enumerate() {
            assert!(*s > 0.0, "row {m} sums to {s}");
        }
        for w in &fb.weights {
            assert!(*w >= 0.0 && *w <= 1.0);
        }
    }

    #[test]
    fn each_bin_feeds_at_most_two_mel_bins() {
        let cfg = MelConfig::default();
        let fb = MelFilterbank::new(&cfg);
        for k in 0..fb.n_bins {
            let hits = (0..fb.n_mels).filter(|&m| fb.row(m)[k] > 0.0).count();
            assert!(hits <= 2, "bin {k} feeds {hits} mel bins");
        }
    }

    #[test]
    fn channel_view_round_trips() {
        let cfg = MelConfig::default();
        let clip = AudioClip::sine(440.0, 1.0, 0.5, CANONICAL_SAMPLE_RATE);
        let mel = waveform_to_mel(&clip, &cfg).unwrap();
        let ch = mel.to_channels();
        assert_eq!(ch.shape(), &[64, mel.n_frames()]);
        let back = MelSpectrogram::from_channels(&ch, cfg);
        assert_eq!(back.frames.data(), mel.frames.data());
    }
}
