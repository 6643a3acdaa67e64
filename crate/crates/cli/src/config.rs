//! TOML run configuration: validated up front, unknown keys rejected,
//! echoed into every run directory.

use std::path::Path;

use anyhow::{bail, Context, Result};
use aural_audio::MelConfig;
use aural_model::fit::FitConfig;
use aural_model::vae::VaeConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub mel: MelSection,
    pub vae: VaeSection,
    pub fit: FitSection,
    pub schedule: ScheduleSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub datasets: DatasetsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 42, deterministic: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelSection {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelSection {
    fn default() -> Self {
        let m = MelConfig::default();
        Self {
            n_fft: m.n_fft,
            hop: m.hop,
            n_mels: m.n_mels,
            sample_rate: m.sample_rate,
            fmin: m.fmin,
            fmax: m.fmax,
            log_floor: m.log_floor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub bottleneck_channels: usize,
    pub hidden: Vec<usize>,
    pub kl_weight: f64,
}

impl Default for VaeSection {
    fn default() -> Self {
        let v = VaeConfig::default();
        Self {
            bottleneck_channels: v.bottleneck_channels,
            hidden: v.hidden,
            kl_weight: v.kl_weight,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub patch_size: usize,
    pub group_size: usize,
    pub n_latent_tokens: usize,
    pub n_blocks: usize,
    pub local_layers: usize,
    pub global_layers: usize,
    pub d_patch: usize,
    pub d_latent: usize,
    pub d_cond: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_patches: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            patch_size: f.patch_size,
            group_size: f.group_size,
            n_latent_tokens: f.n_latent_tokens,
            n_blocks: f.n_blocks,
            local_layers: f.local_layers,
            global_layers: f.global_layers,
            d_patch: f.d_patch,
            d_latent: f.d_latent,
            d_cond: f.d_cond,
            heads: f.heads,
            dropout: f.dropout,
            max_patches: f.max_patches,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: aural_model::diffusion::DEFAULT_T,
            beta_start: aural_model::diffusion::DEFAULT_BETA_START,
            beta_end: aural_model::diffusion::DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub p_uncond: f64,
    pub cosine: bool,
    pub vae_lr: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            weight_decay: 0.1,
            grad_clip: 1.0,
            p_uncond: aural_model::diffusion::DEFAULT_P_UNCOND,
            cosine: true,
            vae_lr: 2e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 4, checkpoint_every: 500, log_every: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub cfg_scale: f64,
    pub steps: usize,
    pub sampler: String,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { cfg_scale: aural_model::diffusion::DEFAULT_CFG_SCALE, steps: 200, sampler: "ddpm".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetsSection {
    pub ids: Vec<String>,
}

impl Default for DatasetsSection {
    fn default() -> Self {
        Self { ids: vec!["audiocaps".into(), "clotho".into(), "autorecap".into()] }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.mel_config().validate().map_err(|e| anyhow::anyhow!("mel: {e}"))?;
        if self.fit.group_size == 0 {
            bail!("fit.group_size must be at least 1");
        }
        self.vae_config().validate().map_err(|e| anyhow::anyhow!("vae: {e}"))?;
        self.fit_config().validate().map_err(|e| anyhow::anyhow!("fit: {e}"))?;
        if self.schedule.steps == 0 {
            bail!("schedule.steps must be positive");
        }
        if !(0.0 < self.schedule.beta_start
            && self.schedule.beta_start <= self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            bail!(
                "schedule.beta_start/beta_end must satisfy 0 < start <= end < 1, got {} and {}",
                self.schedule.beta_start,
                self.schedule.beta_end
            );
        }
        // Cross-field: canonical mel length must divide by the VAE stack,
        // and the padded patch count must fit the position table.
        let frames = self.mel_config().canonical_frames();
        let down = self.vae_config().temporal_downsample();
        if frames % down != 0 {
            bail!("mel: canonical frame count {frames} not divisible by vae downsample {down}");
        }
        let latent_len = frames / down;
        let fit = self.fit_config();
        if fit.n_padded(latent_len) > fit.max_patches {
            bail!(
                "fit.max_patches {} too small for {} padded patches",
                fit.max_patches,
                fit.n_padded(latent_len)
            );
        }
        if !(0.0..=1.0).contains(&self.optim.p_uncond) {
            bail!("optim.p_uncond {} outside [0, 1]", self.optim.p_uncond);
        }
        match self.sample.sampler.as_str() {
            "ddpm" | "ddim" => {}
            other => bail!("sample.sampler must be ddpm or ddim, got {other:?}"),
        }
        if self.datasets.ids.is_empty() {
            bail!("datasets.ids must register at least one dataset");
        }
        Ok(())
    }

    pub fn mel_config(&self) -> MelConfig {
        MelConfig {
            n_fft: self.mel.n_fft,
            hop: self.mel.hop,
            n_mels: self.mel.n_mels,
            sample_rate: self.mel.sample_rate,
            fmin: self.mel.fmin,
            fmax: self.mel.fmax,
            log_floor: self.mel.log_floor,
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            in_channels: self.mel.n_mels,
            bottleneck_channels: self.vae.bottleneck_channels,
            hidden: self.vae.hidden.clone(),
            kl_weight: self.vae.kl_weight,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            in_channels: self.vae.bottleneck_channels,
            patch_size: self.fit.patch_size,
            group_size: self.fit.group_size,
            n_latent_tokens: self.fit.n_latent_tokens,
            n_blocks: self.fit.n_blocks,
            local_layers: self.fit.local_layers,
            global_layers: self.fit.global_layers,
            d_patch: self.fit.d_patch,
            d_latent: self.fit.d_latent,
            d_cond: self.fit.d_cond,
            heads: self.fit.heads,
            dropout: self.fit.dropout,
            max_patches: self.fit.max_patches,
            // Null row plus every registered id.
            n_dataset_ids: self.datasets.ids.len() + 1,
        }
    }

    pub fn registry(&self) -> Result<aural_model::conditioning::DatasetRegistry> {
        aural_model::conditioning::DatasetRegistry::new(&self.datasets.ids)
            .map_err(|e| anyhow::anyhow!("datasets: {e}"))
    }

    /// Latent sequence length for a canonical 10 s clip.
    pub fn canonical_latent_len(&self) -> usize {
        self.mel_config().canonical_frames() / self.vae_config().temporal_downsample()
    }

    pub fn echo_to(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing config echo")?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_reference_hyperparameters() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.fit.patch_size, 1);
        assert_eq!(cfg.fit.group_size, 32);
        assert_eq!(cfg.optim.lr, 5e-3);
        assert_eq!(cfg.optim.weight_decay, 0.1);
        assert_eq!(cfg.fit.dropout, 0.1);
        assert_eq!(cfg.schedule.steps, 1000);
        assert_eq!(cfg.schedule.beta_start, 1e-4);
        assert_eq!(cfg.schedule.beta_end, 2e-2);
        assert_eq!(cfg.canonical_latent_len(), 125);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<RunConfig>("[fit]\ngruop_size = 32\n").unwrap_err();
        assert!(err.to_string().contains("gruop_size"), "{err}");
    }

    #[test]
    fn zero_group_size_rejected() {
        let cfg: RunConfig = toml::from_str("[fit]\ngroup_size = 0\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("group_size"), "{err}");
    }

    #[test]
    fn missing_file_is_a_path_error() {
        let err = RunConfig::load(Path::new("/nonexistent/config.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/config.toml"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.toml");
        let cfg = RunConfig::default();
        cfg.echo_to(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.fit.group_size, cfg.fit.group_size);
        assert_eq!(back.datasets.ids, cfg.datasets.ids);
    }
}
