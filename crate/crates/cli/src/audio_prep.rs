//! Audio loading and latent preparation shared by the training commands.

use std::path::Path;

use anyhow::{Context, Result};
use aural_audio::{read_wav, waveform_to_mel, AudioClip, MelConfig};
use aural_core::Tensor;
use aural_miner::ManifestRecord;
use aural_model::diffusion::TrainItem;
use aural_model::vae::Vae1d;

/// Channels-first mel ([n_mels, T]) of one wav file, resampled to the
/// canonical rate and padded or trimmed to exactly 10 s.
pub fn wav_to_canonical_mel(path: &Path, mel_cfg: &MelConfig) -> Result<Tensor> {
    let clip = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
    let clip = prepare_clip(&clip, None, mel_cfg)?;
    let mel = waveform_to_mel(&clip, mel_cfg)?;
    Ok(mel.to_channels())
}

/// Resample to the canonical rate, optionally slice a [start_ms, end_ms)
/// span, and pad or trim to 10 s.
pub fn prepare_clip(
    clip: &AudioClip,
    span_ms: Option<(u64, u64)>,
    mel_cfg: &MelConfig,
) -> Result<AudioClip> {
    let sliced = match span_ms {
        Some((s, e)) => clip.slice_ms(s, e),
        None => clip.clone(),
    };
    let resampled = if sliced.sample_rate == mel_cfg.sample_rate {
        sliced
    } else {
        sliced.resample(mel_cfg.sample_rate)
    };
    Ok(resampled.pad_or_trim(10 * mel_cfg.sample_rate as usize))
}

/// Encode every manifest record into a diffusion training item. The audio
/// for a record lives at `<audio_root>/<video_id>.wav`.
pub fn manifest_to_items(
    records: &[ManifestRecord],
    audio_root: &Path,
    mel_cfg: &MelConfig,
    vae: &Vae1d,
    dataset_id: &str,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::with_capacity(records.len());
    for rec in records {
        let path = audio_root.join(format!("{}.wav", rec.video_id));
        let clip = read_wav(&path).with_context(|| format!("reading {}", path.display()))?;
        let clip = prepare_clip(&clip, Some((rec.start_ms, rec.end_ms)), mel_cfg)?;
        let mel = waveform_to_mel(&clip, mel_cfg)?;
        let latent = vae.encode_mean(&mel.to_channels())?;
        items.push(TrainItem {
            latent,
            caption: rec.caption.clone(),
            dataset_id: dataset_id.to_string(),
        });
    }
    Ok(items)
}
