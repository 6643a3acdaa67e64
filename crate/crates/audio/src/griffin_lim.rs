//! Griffin-Lim phase reconstruction from a log-mel spectrogram.
//!
//! The mel filterbank is inverted by multiplicative-update NNLS (Lee-Seung),
//! then magnitudes are fixed while phases are refined by alternating
//! STFT/iSTFT projections. Zero-phase initialization keeps the whole path
//! deterministic.

use rustfft::num_complex::Complex;

use crate::clip::AudioClip;
use crate::error::Result;
use crate::mel::{MelFilterbank, MelSpectrogram};
use crate::stft::{istft, stft, Spectrogram};

pub const DEFAULT_GRIFFIN_LIM_ITERS: usize = 60;
const NNLS_ITERS: usize = 30;
const EPS: f64 = 1e-12;

/// Non-negative linear-spectrogram estimate for one mel frame.
fn nnls_frame(fb: &MelFilterbank, mel: &[f64]) -> Vec<f64> {
    let n_bins = fb.n_bins;
    // x0 = M^T m
    let mut x = vec![0.0; n_bins];
    for m in 0..fb.n_mels {
        let row = fb.row(m);
        for (xi, w) in x.iter_mut().zip(row) {
            *xi += w * mel[m];
        }
    }
    // Numerator M^T m is fixed across updates.
    let numer = x.clone();
    let mut projected = vec![0.0; fb.n_mels];
    let mut denom = vec![0.0; n_bins];
    for _ in 0..NNLS_ITERS {
        // denom = M^T (M x)
        for (m, p) in projected.iter_mut().enumerate() {
            *p = fb.row(m).iter().zip(&x).map(|(w, v)| w * v).sum();
        }
        denom.fill(0.0);
        for m in 0..fb.n_mels {
            let row = fb.row(m);
            let p = projected[m];
            for (d, w) in denom.iter_mut().zip(row) {
                *d += w * p;
            }
        }
        for i in 0..n_bins {
            x[i] *= numer[i] / (denom[i] + EPS);
        }
    }
    x
}

/// Linear magnitude target [T, n_bins] from a log-mel spectrogram.
fn mel_to_linear(mel: &MelSpectrogram) -> Vec<Vec<f64>> {
    let fb = MelFilterbank::new(&mel.config);
    let t = mel.n_frames();
    let n_mels = mel.n_mels();
    (0..t)
        .map(|f| {
            let frame: Vec<f64> = (0..n_mels).map(|m| mel.frames.get(&[f, m]).exp()).collect();
            nnls_frame(&fb, &frame)
        })
        .collect()
}

fn spectrogram_from(target: &[Vec<f64>], phases: Option<&Spectrogram>, n_fft: usize, hop: usize) -> Spectrogram {
    let frames = target
        .iter()
        .enumerate()
        .map(|(t, mags)| {
            mags.iter()
                .enumerate()
                .map(|(k, &m)| match phases {
                    Some(p) => {
                        let c = p.frames[t][k];
                        let norm = c.norm();
                        if norm > EPS {
                            c / norm * m
                        } else {
                            Complex::new(m, 0.0)
                        }
                    }
                    None => Complex::new(m, 0.0),
                })
                .collect()
        })
        .collect();
    Spectrogram { frames, n_fft, hop }
}

fn spectral_distance(got: &Spectrogram, target: &[Vec<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (frame, tgt) in got.frames.iter().zip(target) {
        for (c, &m) in frame.iter().zip(tgt) {
            let d = c.norm() - m;
            num += d * d;
            den += m * m;
        }
    }
    (num / den.max(EPS)).sqrt()
}

/// Reconstruct a waveform; also returns the spectral-convergence value
/// `|| |S_rec| - |S_tgt| || / || |S_tgt| ||` after each iteration.
pub fn griffin_lim_with_trace(mel: &MelSpectrogram, iters: usize) -> Result<(AudioClip, Vec<f64>)> {
    assert!(iters >= 1);
    let cfg = &mel.config;
    let target = mel_to_linear(mel);
    let mut spec = spectrogram_from(&target, None, cfg.n_fft, cfg.hop);
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let wave = istft(&spec, cfg.sample_rate);
        let rebuilt = stft(&wave, cfg)?;
        trace.push(spectral_distance(&rebuilt, &target));
        spec = spectrogram_from(&target, Some(&rebuilt), cfg.n_fft, cfg.hop);
    }
    Ok((istft(&spec, cfg.sample_rate), trace))
}

pub fn griffin_lim(mel: &MelSpectrogram, iters: usize) -> Result<AudioClip> {
    Ok(griffin_lim_with_trace(mel, iters)?.0)
}
