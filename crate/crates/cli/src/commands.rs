//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use aural_audio::{griffin_lim, write_wav, MelSpectrogram, DEFAULT_GRIFFIN_LIM_ITERS};
use aural_miner::providers::{Captioner, ClapScorer, StdioCaptioner, StdioScorer, StubCaptioner, StubScorer};
use aural_miner::{compute_stats, read_manifest, write_manifest, FilterConfig};
use aural_model::conditioning::build_conditioning;
use aural_model::diffusion::{
    linear_schedule, sample, DiffusionTrainConfig, SampleConfig, SamplerKind,
};
use aural_model::fit::{flop_linearity, FitModel};
use aural_model::optim::{Lamb, LambConfig};
use aural_model::vae::{train_vae, Vae1d, VaeTrainConfig};

use crate::audio_prep::{manifest_to_items, wav_to_canonical_mel};
use crate::bundle::{
    load_bundle, load_vae_checkpoint, save_training_checkpoint, save_vae_checkpoint,
};
use crate::config::RunConfig;
use crate::run_dir::{write_csv, RunDir};

fn load_fixture_table(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading fixture {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing fixture {}", path.display()))
}

fn load_score_table(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading fixture {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing fixture {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
pub fn mine(
    transcripts: &Path,
    durations: &Path,
    filters: Option<&Path>,
    out: &Path,
    allow_unscored: bool,
    captions: Option<&Path>,
    scores: Option<&Path>,
    captioner_cmd: Option<&str>,
    scorer_cmd: Option<&str>,
    provider_timeout_s: u64,
) -> Result<()> {
    let cfg: FilterConfig = match filters {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading filters {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing filters {}", p.display()))?
        }
        None => FilterConfig::default(),
    };
    cfg.validate()?;

    let timeout = Duration::from_secs(provider_timeout_s);
    let mut captioner: Box<dyn Captioner> = match (captioner_cmd, captions) {
        (Some(cmd), _) => Box::new(StdioCaptioner::spawn(cmd, &[], timeout)?),
        (None, Some(path)) => Box::new(StubCaptioner::from_table(load_fixture_table(path)?)),
        (None, None) => Box::new(StubCaptioner::synthetic()),
    };
    let mut scorer: Box<dyn ClapScorer> = match (scorer_cmd, scores) {
        (Some(cmd), _) => Box::new(StdioScorer::spawn(cmd, &[], timeout)?),
        (None, Some(path)) => {
            Box::new(StubScorer { table: load_score_table(path)?, default_score: None })
        }
        // Stub default: every pair scores comfortably above the threshold.
        (None, None) => Box::new(StubScorer { table: BTreeMap::new(), default_score: Some(0.5) }),
    };

    let durations = aural_miner::load_durations(durations)?;
    let output = aural_miner::mine(
        transcripts,
        &durations,
        &cfg,
        captioner.as_mut(),
        scorer.as_mut(),
        allow_unscored,
    )?;

    std::fs::create_dir_all(out)?;
    write_manifest(&output.records, &out.join("manifest.jsonl"))?;
    output.stats.write_json(&out.join("stats.json"))?;
    output.stats.write_csv(&out.join("stats.csv"))?;
    let drop_rows: Vec<String> =
        output.report.drops.iter().map(|(stage, n)| format!("{stage},{n}")).collect();
    write_csv(&out.join("drops.csv"), "stage,count", &drop_rows)?;
    if !output.report.warnings.is_empty() {
        std::fs::write(out.join("warnings.log"), output.report.warnings.join("\n") + "\n")?;
    }

    println!(
        "mined {} records from {} segments ({} dropped); manifest at {}",
        output.report.output_records,
        output.report.input_segments,
        output.report.drops.total(),
        out.join("manifest.jsonl").display()
    );
    if !output.report.reconciles() {
        bail!("drop bookkeeping failed to reconcile");
    }
    Ok(())
}

pub fn train_vae_cmd(
    config_path: &Path,
    corpus: &Path,
    out: &Path,
    run_dir: Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dir = RunDir::create(run_dir, "train-vae")?;
    cfg.echo_to(&dir.path("config_echo.toml"))?;

    let mel_cfg = cfg.mel_config();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(corpus)
        .with_context(|| format!("reading corpus dir {}", corpus.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("wav"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .wav files under {}", corpus.display());
    }
    let mut mels = Vec::with_capacity(paths.len());
    for p in &paths {
        mels.push(wav_to_canonical_mel(p, &mel_cfg)?);
    }
    println!("loaded {} clips from {}", mels.len(), corpus.display());

    let mut rng = aural_core::seeded_rng(cfg.run.seed);
    let mut vae = Vae1d::new(cfg.vae_config(), &mut rng)?;
    let train_cfg = VaeTrainConfig {
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        lr: cfg.optim.vae_lr,
        smooth: 0.02,
        grad_clip: cfg.optim.grad_clip,
    };
    let report = train_vae(&mut vae, &mels, &train_cfg, &mut rng)?;

    let rows: Vec<String> = report
        .curve
        .iter()
        .map(|(step, raw, smooth)| format!("{step},{raw},{smooth}"))
        .collect();
    write_csv(&dir.path("metrics.csv"), "step,recon,recon_smoothed", &rows)?;
    save_vae_checkpoint(out, &cfg, &vae)?;
    println!(
        "trained vae for {} steps; recon {:.4} -> {:.4}; checkpoint at {}",
        cfg.train.steps,
        report.curve.first().map(|c| c.1).unwrap_or(f64::NAN),
        report.final_smoothed(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train_diffusion_cmd(
    manifest: &Path,
    audio_root: &Path,
    vae_ckpt: Option<&Path>,
    config_path: &Path,
    out: &Path,
    run_dir: Option<PathBuf>,
    resume: Option<&Path>,
    dataset_id: &str,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dir = RunDir::create(run_dir, "train-diffusion")?;
    cfg.echo_to(&dir.path("config_echo.toml"))?;
    let registry = cfg.registry()?;
    registry.lookup(dataset_id)?;
    let schedule = linear_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)?;

    // Model + optimizer + rng, fresh or resumed.
    let (vae, mut fit, mut opt, mut rng, start_step) = match resume {
        Some(ckpt) => {
            let bundle = load_bundle(ckpt)?;
            let Some(state) = bundle.state else {
                bail!("{} has no training state to resume from", ckpt.display());
            };
            let mut opt = Lamb::new(
                LambConfig { lr: cfg.optim.lr, weight_decay: cfg.optim.weight_decay, ..Default::default() },
                &bundle.fit.params,
            );
            opt.restore_state(&bundle.fit.params, &state.opt_entries, state.step)?;
            (bundle.vae, bundle.fit, opt, state.rng, state.step)
        }
        None => {
            let Some(vae_ckpt) = vae_ckpt else {
                bail!("--vae is required unless resuming");
            };
            let vae = load_vae_checkpoint(vae_ckpt, &cfg)?;
            let mut rng = aural_core::seeded_rng(cfg.run.seed);
            let fit = FitModel::new(cfg.fit_config(), &mut rng)?;
            let opt = Lamb::new(
                LambConfig { lr: cfg.optim.lr, weight_decay: cfg.optim.weight_decay, ..Default::default() },
                &fit.params,
            );
            (vae, fit, opt, rng, 0)
        }
    };

    let records = read_manifest(manifest)?;
    if records.is_empty() {
        bail!("manifest {} is empty", manifest.display());
    }
    let items = manifest_to_items(&records, audio_root, &cfg.mel_config(), &vae, dataset_id)?;
    println!("prepared {} latents from {}", items.len(), manifest.display());

    let train_cfg = DiffusionTrainConfig {
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        lr: cfg.optim.lr,
        cosine_total: cfg.optim.cosine.then_some(start_step + cfg.train.steps),
        p_uncond: cfg.optim.p_uncond,
        grad_clip: cfg.optim.grad_clip,
        weight_decay: cfg.optim.weight_decay,
        smooth: 0.02,
        start_step,
    };
    let report = aural_model::diffusion::train_diffusion(
        &mut fit,
        &mut opt,
        &items,
        &schedule,
        &registry,
        &train_cfg,
        &mut rng,
    )?;

    let rows: Vec<String> = report
        .curve
        .iter()
        .map(|(step, raw, smooth)| format!("{step},{raw},{smooth}"))
        .collect();
    write_csv(&dir.path("metrics.csv"), "step,loss,loss_smoothed", &rows)?;
    save_training_checkpoint(out, &cfg, &vae, &fit, &opt, start_step + cfg.train.steps, &rng)?;
    println!(
        "trained diffusion for {} steps (skipped {}); loss {:.4} -> {:.4}; checkpoint at {}",
        cfg.train.steps,
        report.skipped_steps,
        report.curve.first().map(|c| c.1).unwrap_or(f64::NAN),
        report.final_smoothed(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn sample_cmd(
    ckpt: &Path,
    prompt: &str,
    dataset_id: &str,
    cfg_scale: Option<f64>,
    steps: Option<usize>,
    sampler: Option<&str>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let bundle = load_bundle(ckpt)?;
    let cfg = &bundle.config;
    let registry = cfg.registry()?;
    let schedule = linear_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)?;

    let sampler = match sampler.unwrap_or(cfg.sample.sampler.as_str()) {
        "ddpm" => SamplerKind::Ddpm,
        "ddim" => SamplerKind::Ddim,
        other => bail!("unknown sampler {other:?} (expected ddpm or ddim)"),
    };
    let sample_cfg = SampleConfig {
        cfg_scale: cfg_scale.unwrap_or(cfg.sample.cfg_scale),
        steps: steps.unwrap_or(cfg.sample.steps),
        sampler,
    };
    let mut rng = aural_core::seeded_rng(seed.unwrap_or(cfg.run.seed));
    let latent_len = cfg.canonical_latent_len();
    // Conditioning is validated before the long reverse chain starts.
    build_conditioning(prompt, 0, dataset_id, &registry, cfg.fit.d_cond)?;

    println!(
        "sampling {:?} with {} steps, guidance {} (latent [{} x {}])",
        prompt,
        sample_cfg.steps,
        sample_cfg.cfg_scale,
        cfg.vae.bottleneck_channels,
        latent_len
    );
    let latent = sample(
        &bundle.fit,
        &schedule,
        prompt,
        dataset_id,
        &registry,
        latent_len,
        &sample_cfg,
        &mut rng,
    )?;
    let mel_channels = bundle.vae.decode_tensor(&latent)?;
    let mel = MelSpectrogram::from_channels(&mel_channels, cfg.mel_config());
    let clip = griffin_lim(&mel, DEFAULT_GRIFFIN_LIM_ITERS)?;
    let clip = clip.pad_or_trim(10 * cfg.mel.sample_rate as usize);
    write_wav(out, &clip)?;
    println!("wrote {} ({:.1} s at {} Hz)", out.display(), clip.duration_s(), clip.sample_rate);
    Ok(())
}

pub fn stats_cmd(manifest: &Path, out: &Path) -> Result<()> {
    let records = read_manifest(manifest)?;
    let stats = compute_stats(&records);
    std::fs::create_dir_all(out)?;
    stats.write_json(&out.join("stats.json"))?;
    stats.write_csv(&out.join("stats.csv"))?;
    println!(
        "{} records over {} videos; stats at {}",
        stats.n_records,
        stats.n_videos,
        out.join("stats.json").display()
    );
    Ok(())
}

pub fn flops_cmd(config_path: &Path, out: &Path, points: &[usize]) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    let max_point = points.iter().copied().max().unwrap_or(0);
    if max_point == 0 {
        bail!("need at least one patch-count point");
    }
    // The probe needs position capacity for the largest sweep point.
    if cfg.fit.max_patches < max_point {
        cfg.fit.max_patches = max_point;
    }
    let mut rng = aural_core::seeded_rng(cfg.run.seed);
    let model = FitModel::new(cfg.fit_config(), &mut rng)?;
    let cond = build_conditioning(
        "flop probe",
        0,
        &cfg.datasets.ids[0],
        &cfg.registry()?,
        cfg.fit.d_cond,
    )?;
    let report = flop_linearity(&model, &cond, points)?;

    let json = serde_json::json!({
        "n_patches": report.n_patches,
        "flops": report.flops,
        "slope": report.slope,
        "intercept": report.intercept,
        "r_squared": report.r_squared,
        "group_size": cfg.fit.group_size,
        "n_latent_tokens": cfg.fit.n_latent_tokens,
    });
    std::fs::write(out, serde_json::to_string_pretty(&json)?)?;
    println!(
        "flops(N) = {:.1} * N + {:.1}, R^2 = {:.6}; report at {}",
        report.slope,
        report.intercept,
        report.r_squared,
        out.display()
    );
    Ok(())
}
