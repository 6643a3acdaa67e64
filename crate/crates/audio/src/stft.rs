//! Short-time Fourier transform with a periodic Hann window and zero
//! center-padding.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::clip::AudioClip;
use crate::error::{AudioError, Result};
use crate::mel::MelConfig;

/// One-sided complex spectrogram, `frames[t][k]` for k in 0..n_fft/2+1.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub frames: Vec<Vec<Complex<f64>>>,
    pub n_fft: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn magnitudes(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(|f| f.iter().map(|c| c.norm()).collect()).collect()
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frame count after zero center-padding by n_fft/2 on both sides:
/// `1 + floor(padded_len - n_fft) / hop`.
pub fn n_frames(len: usize, n_fft: usize, hop: usize) -> usize {
    let padded = len + 2 * (n_fft / 2);
    if padded < n_fft {
        return 0;
    }
    1 + (padded - n_fft) / hop
}

pub fn stft(clip: &AudioClip, cfg: &MelConfig) -> Result<Spectrogram> {
    if clip.is_empty() {
        return Err(AudioError::InputTooShort("empty clip".into()));
    }
    let n_fft = cfg.n_fft;
    let hop = cfg.hop;
    let pad = n_fft / 2;
    let mut padded = vec![0.0f64; clip.len() + 2 * pad];
    for (i, &s) in clip.samples.iter().enumerate() {
        padded[pad + i] = s as f64;
    }

    let window = hann_window(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;
    let t = n_frames(clip.len(), n_fft, hop);

    let mut frames = Vec::with_capacity(t);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for fidx in 0..t {
        let start = fidx * hop;
        for i in 0..n_fft {
            buf[i] = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..n_bins].to_vec());
    }
    Ok(Spectrogram { frames, n_fft, hop })
}

/// Inverse STFT by weighted overlap-add; undoes the center padding so
/// the result has (T-1)*hop samples.
pub fn istft(spec: &Spectrogram, sample_rate: u32) -> AudioClip {
    let n_fft = spec.n_fft;
    let hop = spec.hop;
    let t = spec.n_frames();
    let n_bins = spec.n_bins();
    if t == 0 {
        return AudioClip::new(Vec::new(), sample_rate);
    }

    let window = hann_window(n_fft);
    let ifft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_inverse(n_fft);

    let padded_len = (t - 1) * hop + n_fft;
    let mut acc = vec![0.0f64; padded_len];
    let mut norm = vec![0.0f64; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];

    for (fidx, frame) in spec.frames.iter().enumerate() {
        buf[..n_bins].copy_from_slice(frame);
        // Restore the conjugate-symmetric negative frequencies.
        for k in n_bins..n_fft {
            buf[k] = frame[n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let start = fidx * hop;
        for i in 0..n_fft {
            let sample = buf[i].re / n_fft as f64;
            acc[start + i] += sample * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }

    let pad = n_fft / 2;
    let out_len = padded_len - 2 * pad;
    let samples = (0..out_len)
        .map(|i| {
            let j = i + pad;
            (acc[j] / norm[j].max(1e-12)) as f32
        })
        .collect();
    AudioClip::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::CANONICAL_SAMPLE_RATE;

    #[test]
    fn sine_peaks_at_expected_bin() {
        // 1 kHz at 16 kHz with n_fft 1024 lands exactly on bin 64.
        let cfg = MelConfig::default();
        let clip = AudioClip::sine(1000.0, 0.5, 0.8, CANONICAL_SAMPLE_RATE);
        let spec = stft(&clip, &cfg).unwrap();
        let mags = spec.magnitudes();
        // Average over interior frames to dodge edge effects.
        let n_bins = spec.n_bins();
        let mut mean = vec![0.0; n_bins];
        for f in &mags[5..mags.len() - 5] {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        let peak = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, (1000.0 * 1024.0 / 16000.0f64).round() as usize);
        assert_eq!(peak, 64);
    }

    #[test]
    fn zero_clip_gives_zero_magnitudes() {
        let cfg = MelConfig::default();
        let clip = AudioClip::silence(0.25, CANONICAL_SAMPLE_RATE);
        let spec = stft(&clip, &cfg).unwrap();
        for frame in spec.magnitudes() {
            for v in frame {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn empty_clip_is_an_error() {
        let cfg = MelConfig::default();
        let clip = AudioClip::new(Vec::new(), CANONICAL_SAMPLE_RATE);
        assert!(matches!(stft(&clip, &cfg), Err(AudioError::InputTooShort(_))));
    }

    #[test]
    fn ten_second_clip_has_1001_frames() {
        let cfg = MelConfig::default();
        let clip = AudioClip::silence(10.0, CANONICAL_SAMPLE_RATE);
        assert_eq!(clip.len(), 160_000);
        let spec = stft(&clip, &cfg).unwrap();
        assert_eq!(spec.n_frames(), 1001);
    }

    #[test]
    fn frame_count_matches_loop_oracle() {
        // Oracle: slide a window over the padded signal and count placements.
        let oracle = |len: usize, n_fft: usize, hop: usize| -> usize {
            let padded = len + 2 * (n_fft / 2);
            let mut count = 0;
            let mut start = 0;
            while start + n_fft <= padded {
                count += 1;
                start += hop;
            }
            count
        };
        for len in [1usize, 7, 100, 1024, 1025, 4099, 160_000] {
            for (n_fft, hop) in [(256usize, 64usize), (1024, 160), (512, 512), (64, 17)] {
                assert_eq!(
                    n_frames(len, n_fft, hop),
                    oracle(len, n_fft, hop),
                    "len={len} n_fft={n_fft} hop={hop}"
                );
            }
        }
    }

    #[test]
    fn parseval_energy_within_one_percent() {
        // COLA-dense hop: total windowed spectral energy over frames,
        // normalized by sum(w^2)/hop, recovers the signal energy.
        let cfg = MelConfig::default();
        let mut state = 0x12345678u64;
        let mut next = || {
            // xorshift, deterministic noise
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as f64 / u64::MAX as f64) - 0.5
        };
        let samples: Vec<f32> = (0..160_000).map(|_| (next() * 0.8) as f32).collect();
        let clip = AudioClip::new(samples, CANONICAL_SAMPLE_RATE);
        let spec = stft(&clip, &cfg).unwrap();

        let mut spectral = 0.0;
        for frame in &spec.frames {
            for (k, c) in frame.iter().enumerate() {
                let e = c.norm_sqr();
                // One-sided spectrum: interior bins appear twice in the full FFT.
                let mult = if k == 0 || k == cfg.n_fft / 2 { 1.0 } else { 2.0 };
                spectral += mult * e;
            }
        }
        let window = hann_window(cfg.n_fft);
        let w2: f64 = window.iter().map(|w| w * w).sum();
        // Parseval per frame contributes a factor n_fft; overlap adds w2/hop.
        let normalized = spectral / (cfg.n_fft as f64 * w2 / cfg.hop as f64);
        let signal: f64 = clip.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        let rel = (normalized - signal).abs() / signal;
        assert!(rel < 0.01, "relative energy error {rel}");
    }

    #[test]
    fn istft_round_trip_recovers_interior() {
        let cfg = MelConfig::default();
        let clip = AudioClip::sine(523.25, 0.5, 0.7, CANONICAL_SAMPLE_RATE);
        let spec = stft(&clip, &cfg).unwrap();
        let rec = istft(&spec, CANONICAL_SAMPLE_RATE);
        // Reconstructed length is (T-1)*hop.
        assert_eq!(rec.len(), (spec.n_frames() - 1) * cfg.hop);
        let n = rec.len().min(clip.len());
        for i in cfg.n_fft..n - cfg.n_fft {
            assert!(
                (rec.samples[i] - clip.samples[i]).abs() < 1e-4,
                "sample {i}: {} vs {}",
                rec.samples[i],
                clip.samples[i]
            );
        }
    }
}
