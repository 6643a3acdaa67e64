//! RIFF/WAVE reading and writing.
//!
//! Reads PCM16 and IEEE float32, any channel count (downmixed to mono by
//! averaging). Writes mono PCM16. PCM16 samples survive a write/read round
//! trip bit-exactly: 16-bit integers over 2^15 are exact in f32.

use std::fs;
use std::path::Path;

use crate::clip::AudioClip;
use crate::error::{AudioError, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

fn format_err(chunk: &str, reason: impl Into<String>) -> AudioError {
    AudioError::Format { chunk: chunk.to_string(), reason: reason.into() }
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path)?;
    read_wav_bytes(&bytes)
}

pub fn read_wav_bytes(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 {
        return Err(format_err("RIFF", "file shorter than RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(format_err("RIFF", "missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(format_err("RIFF", "missing WAVE form type"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes([bytes[pos + 4], bytes[pos + 5], bytes[pos + 6], bytes[pos + 7]])
            as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            let name = String::from_utf8_lossy(id).into_owned();
            return Err(format_err(&name, "chunk runs past end of file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(format_err("fmt ", "chunk too small"));
                }
                let b = &bytes[body_start..];
                let format = u16::from_le_bytes([b[0], b[1]]);
                let channels = u16::from_le_bytes([b[2], b[3]]);
                let rate = u32::from_le_bytes([b[4], b[5], b[6], b[7]]);
                let bits = u16::from_le_bytes([b[14], b[15]]);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| format_err("fmt ", "chunk missing"))?;
    let data = data.ok_or_else(|| format_err("data", "chunk missing"))?;
    if channels == 0 {
        return Err(format_err("fmt ", "zero channels"));
    }

    let samples: Vec<f32> = match (format, bits) {
        (FORMAT_PCM, 16) => decode_pcm16(data, channels as usize),
        (FORMAT_IEEE_FLOAT, 32) => decode_f32(data, channels as usize),
        _ => {
            return Err(format_err(
                "fmt ",
                format!("unsupported codec: format {} with {} bits", format, bits),
            ))
        }
    };

    Ok(AudioClip::new(samples, rate))
}

fn decode_pcm16(data: &[u8], channels: usize) -> Vec<f32> {
    let frame_bytes = 2 * channels;
    let n_frames = data.len() / frame_bytes;
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut acc = 0.0f64;
        for c in 0..channels {
            let off = f * frame_bytes + c * 2;
            let s = i16::from_le_bytes([data[off], data[off + 1]]);
            acc += s as f64 / 32768.0;
        }
        out.push((acc / channels as f64) as f32);
    }
    out
}

fn decode_f32(data: &[u8], channels: usize) -> Vec<f32> {
    let frame_bytes = 4 * channels;
    let n_frames = data.len() / frame_bytes;
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut acc = 0.0f64;
        for c in 0..channels {
            let off = f * frame_bytes + c * 4;
            let s = f32::from_le_bytes([data[off], data[off + 1], data[off + 2], data[off + 3]]);
            acc += s as f64;
        }
        out.push((acc / channels as f64) as f32);
    }
    out
}

/// Write mono PCM16.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    fs::write(path, encode_wav_bytes(clip))?;
    Ok(())
}

pub fn encode_wav_bytes(clip: &AudioClip) -> Vec<u8> {
    let n = clip.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &clip.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
