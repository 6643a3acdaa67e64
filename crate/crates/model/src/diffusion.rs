//! Linear-schedule DDPM over VAE latents: epsilon-prediction training with
//! LAMB, ancestral or DDIM sampling, classifier-free guidance.

use aural_core::{GradTape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::{build_conditioning, null_conditioning, DatasetRegistry};
use crate::error::{ModelError, Result};
use crate::fit::{FitModel, ForwardOptions};
use crate::optim::{clip_global_norm, cosine_lr, Lamb};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
pub const DEFAULT_P_UNCOND: f64 = 0.1;
pub const DEFAULT_CFG_SCALE: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Betas linearly spaced over [beta_start, beta_end], inclusive.
pub fn linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(ModelError::Config("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ModelError::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Tensor {
    let ab = schedule.alpha_bars[t];
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(&z, &e)| ca * z + cb * e).collect();
    Tensor::new(z0.shape().to_vec(), data).expect("q_sample shape")
}

/// Classifier-free guidance: eps_uncond + s * (eps_cond - eps_uncond).
pub fn guide(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Tensor {
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| u + scale * (c - u))
        .collect();
    Tensor::new(eps_cond.shape().to_vec(), data).expect("guide shape")
}

/// One ancestral step between cumulative products abar_cur -> abar_prev
/// (abar_prev = 1 denotes the final step and is deterministic: the posterior
/// variance (1 - abar_prev)/(1 - abar_cur) * beta_eff vanishes).
pub fn ddpm_step_between<R: Rng>(
    z_t: &Tensor,
    eps_hat: &Tensor,
    abar_cur: f64,
    abar_prev: f64,
    rng: &mut R,
) -> Tensor {
    let alpha_eff = abar_cur / abar_prev;
    let beta_eff = 1.0 - alpha_eff;
    let inv_sqrt_alpha = 1.0 / alpha_eff.sqrt();
    let eps_coeff = beta_eff / (1.0 - abar_cur).sqrt();
    let var = (1.0 - abar_prev) / (1.0 - abar_cur) * beta_eff;
    let sigma = var.max(0.0).sqrt();
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| {
            let mean = inv_sqrt_alpha * (z - eps_coeff * e);
            if sigma > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                mean + sigma * n
            } else {
                mean
            }
        })
        .collect();
    Tensor::new(z_t.shape().to_vec(), data).expect("step shape")
}

/// Full-chain ancestral step at timestep `t` (t = 0 is deterministic).
pub fn ddpm_step<R: Rng>(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Tensor {
    let abar_cur = schedule.alpha_bars[t];
    let abar_prev = if t > 0 { schedule.alpha_bars[t - 1] } else { 1.0 };
    ddpm_step_between(z_t, eps_hat, abar_cur, abar_prev, rng)
}

/// Deterministic DDIM (eta = 0) step between cumulative products.
pub fn ddim_step_between(z_t: &Tensor, eps_hat: &Tensor, abar_cur: f64, abar_prev: f64) -> Tensor {
    let sa = abar_cur.sqrt();
    let sb = (1.0 - abar_cur).sqrt();
    let pa = abar_prev.sqrt();
    let pb = (1.0 - abar_prev).sqrt();
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| {
            let x0 = (z - sb * e) / sa;
            pa * x0 + pb * e
        })
        .collect();
    Tensor::new(z_t.shape().to_vec(), data).expect("step shape")
}

/// Descending timestep subsequence ending at 0, evenly spaced.
pub fn sample_timesteps(t_total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, t_total);
    if steps == 1 {
        return vec![0];
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            ((steps - 1 - i) as f64 * (t_total - 1) as f64 / (steps - 1) as f64).round() as usize
        })
        .collect();
    ts.dedup();
    ts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub cfg_scale: f64,
    pub steps: usize,
    pub sampler: SamplerKind,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { cfg_scale: DEFAULT_CFG_SCALE, steps: 200, sampler: SamplerKind::Ddpm }
    }
}

/// Reverse chain from N(0, I) over the latent shape [c, L].
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &FitModel,
    schedule: &NoiseSchedule,
    text: &str,
    dataset_id: &str,
    registry: &DatasetRegistry,
    latent_len: usize,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let d_c = model.config.d_cond;
    let mut z = Tensor::randn(&[model.config.in_channels, latent_len], rng);
    let ts = sample_timesteps(schedule.len(), cfg.steps);
    for (i, &t) in ts.iter().enumerate() {
        let cond = build_conditioning(text, t, dataset_id, registry, d_c)?;
        let eps_cond = model.predict(&z, &cond)?;
        let eps = if cfg.cfg_scale == 1.0 {
            eps_cond
        } else {
            let eps_uncond = model.predict(&z, &null_conditioning(t, d_c))?;
            guide(&eps_uncond, &eps_cond, cfg.cfg_scale)
        };
        let abar_cur = schedule.alpha_bars[t];
        let abar_prev = if i + 1 < ts.len() { schedule.alpha_bars[ts[i + 1]] } else { 1.0 };
        z = match cfg.sampler {
            SamplerKind::Ddpm => ddpm_step_between(&z, &eps, abar_cur, abar_prev, rng),
            SamplerKind::Ddim => ddim_step_between(&z, &eps, abar_cur, abar_prev),
        };
    }
    Ok(z)
}

/// One unit of diffusion training data.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub latent: Tensor,
    pub caption: String,
    pub dataset_id: String,
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub cosine_total: Option<u64>,
    pub p_uncond: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub smooth: f64,
    pub start_step: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            lr: 5e-3,
            cosine_total: None,
            p_uncond: DEFAULT_P_UNCOND,
            grad_clip: 1.0,
            weight_decay: 0.1,
            smooth: 0.02,
            start_step: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainReport {
    /// (step, raw epsilon loss, smoothed).
    pub curve: Vec<(u64, f64, f64)>,
    pub skipped_steps: u64,
}

impl DiffusionTrainReport {
    pub fn final_smoothed(&self) -> f64 {
        self.curve.last().map(|c| c.2).unwrap_or(f64::NAN)
    }
}

/// Epsilon-prediction training with LAMB and optional cosine decay. The
/// model's optimizer state is returned alongside so callers can checkpoint
/// and resume bit-exactly.
pub fn train_diffusion(
    model: &mut FitModel,
    opt: &mut Lamb,
    items: &[TrainItem],
    schedule: &NoiseSchedule,
    registry: &DatasetRegistry,
    cfg: &DiffusionTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DiffusionTrainReport> {
    if items.is_empty() {
        return Err(ModelError::Config("no training items".into()));
    }
    let d_c = model.config.d_cond;
    let mut curve = Vec::new();
    let mut smoothed = f64::NAN;
    let mut skipped = 0;

    for step in cfg.start_step..cfg.start_step + cfg.steps {
        let mut tape = GradTape::new();
        let bound = model.params.bind(&mut tape, true);
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let item = &items[rng.gen_range(0..items.len())];
            let t = rng.gen_range(0..schedule.len());
            let eps = Tensor::randn(item.latent.shape(), rng);
            let z_t = q_sample(&item.latent, t, &eps, schedule);
            let drop_cond = rng.gen::<f64>() < cfg.p_uncond;
            let cond = if drop_cond {
                null_conditioning(t, d_c)
            } else {
                build_conditioning(&item.caption, t, &item.dataset_id, registry, d_c)?
            };
            let z_id = tape.constant(z_t);
            let eps_id = tape.constant(eps);
            let eps_hat = model.forward(
                &mut tape,
                &bound,
                z_id,
                &cond,
                &ForwardOptions { train: true, disable_write: false },
                rng,
            )?;
            let diff = tape.sub(eps_hat, eps_id)?;
            let sq = tape.square(diff);
            losses.push(tape.mean_all(sq));
        }
        let mut batch = losses[0];
        for &l in &losses[1..] {
            batch = tape.add(batch, l)?;
        }
        let batch = tape.scale(batch, 1.0 / cfg.batch_size as f64);
        let loss_now = tape.value(batch).item();
        if !loss_now.is_finite() {
            return Err(ModelError::Diverged { step, reason: "non-finite loss".into() });
        }

        tape.backward(batch)?;
        let mut grads = model.params.grads(&tape, &bound);
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = match cfg.cosine_total {
            Some(total) => cosine_lr(cfg.lr, step, total),
            None => cfg.lr,
        };
        if opt.step(&mut model.params, &grads, lr) == crate::optim::StepOutcome::SkippedNonFinite {
            skipped += 1;
        }

        smoothed = if smoothed.is_nan() {
            loss_now
        } else {
            (1.0 - cfg.smooth) * smoothed + cfg.smooth * loss_now
        };
        curve.push((step, loss_now, smoothed));
    }
    Ok(DiffusionTrainReport { curve, skipped_steps: skipped })
}

/// Expected epsilon loss of a model that always predicts zero: 1.0.
pub fn zero_prediction_loss() -> f64 {
    1.0
}

// ── RNG state (for bit-exact resume) ────────────────────────────────

/// Serialize a ChaCha8 RNG as checkpoint tensors. The 32 seed bytes and the
/// 128-bit word position are stored as small integers, exact in f32.
pub fn rng_state_entries(rng: &ChaCha8Rng) -> Vec<(String, Tensor)> {
    let seed = rng.get_seed();
    let seed_t = Tensor::new(vec![32], seed.iter().map(|&b| b as f64).collect()).unwrap();
    let pos = rng.get_word_pos();
    let digits: Vec<f64> = (0..8).map(|i| ((pos >> (16 * i)) & 0xFFFF) as f64).collect();
    let pos_t = Tensor::new(vec![8], digits).unwrap();
    vec![("meta.rng_seed".into(), seed_t), ("meta.rng_word_pos".into(), pos_t)]
}

pub fn rng_from_entries(loaded: &[(String, Tensor)]) -> Result<ChaCha8Rng> {
    let find = |name: &str| {
        loaded
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ModelError::Config(format!("checkpoint missing {name:?}")))
    };
    let seed_t = find("meta.rng_seed")?;
    let mut seed = [0u8; 32];
    for (i, v) in seed_t.data().iter().enumerate() {
        seed[i] = *v as u8;
    }
    let pos_t = find("meta.rng_word_pos")?;
    let mut pos: u128 = 0;
    for (i, v) in pos_t.data().iter().enumerate() {
        pos |= (*v as u128) << (16 * i);
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(pos);
    Ok(rng)
}
