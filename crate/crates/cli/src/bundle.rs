//! Checkpoint bundles. `train-vae` writes `vae.*` tensors; `train-diffusion`
//! writes a self-contained bundle (`fit.*`, `vae.*`, optimizer moments, step
//! and RNG state) plus a `<file>.toml` sidecar echoing the full config so
//! `sample` needs nothing else.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aural_core::{checkpoint, Tensor};
use aural_model::diffusion::{rng_from_entries, rng_state_entries};
use aural_model::fit::FitModel;
use aural_model::optim::Lamb;
use aural_model::vae::Vae1d;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".toml");
    ckpt.with_file_name(name)
}

pub fn save_vae_checkpoint(path: &Path, cfg: &RunConfig, vae: &Vae1d) -> Result<()> {
    let entries = vae.params.checkpoint_entries("vae.");
    checkpoint::save(path, &entries).context("writing vae checkpoint")?;
    cfg.echo_to(&sidecar_path(path))?;
    Ok(())
}

pub fn load_vae_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Vae1d> {
    let loaded = checkpoint::load(path).context("reading vae checkpoint")?;
    let mut rng = aural_core::seeded_rng(0);
    let mut vae = Vae1d::new(cfg.vae_config(), &mut rng)?;
    vae.params.load_checkpoint_entries(&loaded, "vae.")?;
    Ok(vae)
}

pub struct TrainingState {
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub opt_entries: Vec<(String, Tensor)>,
}

pub fn save_training_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    vae: &Vae1d,
    fit: &FitModel,
    opt: &Lamb,
    step: u64,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in fit.params.iter() {
        entries.push((format!("fit.{name}"), t.clone()));
    }
    for (name, t) in vae.params.iter() {
        entries.push((format!("vae.{name}"), t.clone()));
    }
    for (name, t) in opt.state_entries(&fit.params) {
        entries.push((name, t.clone()));
    }
    entries.push(("meta.step".into(), Tensor::new(vec![1], vec![step as f64])?));
    entries.extend(rng_state_entries(rng));

    let views: Vec<(String, &Tensor)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
    checkpoint::save(path, &views).context("writing training checkpoint")?;
    cfg.echo_to(&sidecar_path(path))?;
    Ok(())
}

pub struct LoadedBundle {
    pub config: RunConfig,
    pub vae: Vae1d,
    pub fit: FitModel,
    pub state: Option<TrainingState>,
}

/// Load a training bundle and its config sidecar.
pub fn load_bundle(path: &Path) -> Result<LoadedBundle> {
    let sidecar = sidecar_path(path);
    if !sidecar.exists() {
        bail!(
            "checkpoint sidecar {} not found; it is written next to every checkpoint",
            sidecar.display()
        );
    }
    let config = RunConfig::load(&sidecar)?;
    let loaded = checkpoint::load(path).context("reading checkpoint")?;

    let mut rng = aural_core::seeded_rng(0);
    let mut vae = Vae1d::new(config.vae_config(), &mut rng)?;
    vae.params.load_checkpoint_entries(&loaded, "vae.")?;
    let mut fit = FitModel::new(config.fit_config(), &mut rng)?;
    fit.params.load_checkpoint_entries(&loaded, "fit.")?;

    let state = match loaded.iter().find(|(n, _)| n == "meta.step") {
        Some((_, t)) => {
            let step = t.data()[0] as u64;
            let rng = rng_from_entries(&loaded)?;
            let opt_entries = loaded
                .iter()
                .filter(|(n, _)| n.starts_with("opt."))
                .cloned()
                .collect();
            Some(TrainingState { step, rng, opt_entries })
        }
        None => None,
    };
    Ok(LoadedBundle { config, vae, fit, state })
}
