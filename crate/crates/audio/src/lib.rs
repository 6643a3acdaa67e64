//! Audio frontend: WAV files in, mel-spectrograms out, and Griffin-Lim to
//! get a waveform back without a neural vocoder.

pub mod clip;
pub mod error;
pub mod griffin_lim;
pub mod mel;
pub mod stft;
pub mod wav;

pub use clip::{AudioClip, CANONICAL_SAMPLE_RATE};
pub use error::{AudioError, Result};
pub use griffin_lim::{griffin_lim, griffin_lim_with_trace, DEFAULT_GRIFFIN_LIM_ITERS};
pub use mel::{waveform_to_mel, MelConfig, MelFilterbank, MelSpectrogram};
pub use stft::{istft, stft, Spectrogram};
pub use wav::{read_wav, write_wav};
