//! 1D-convolutional VAE over mel-spectrograms, mel bins as channels.
//!
//! Encoder: stem conv + three stride-2 stages (8x temporal downsample), then
//! a head producing mean ‖ logvar. Decoder mirrors it with nearest-neighbor
//! upsampling convs. Losses are L1 reconstruction + a small KL.

use aural_core::{GradTape, Tensor, ValueId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};
use crate::optim::{clip_global_norm, Lamb, LambConfig};
use crate::params::{Bound, ParamSet};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    /// Stem width followed by the width after each stride-2 stage.
    pub hidden: Vec<usize>,
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            in_channels: 64,
            bottleneck_channels: 64,
            hidden: vec![32, 64, 128, 256],
            kl_weight: 1e-6,
        }
    }
}

impl VaeConfig {
    pub fn n_stages(&self) -> usize {
        self.hidden.len() - 1
    }

    /// Power of two achieved by the stride-2 stages.
    pub fn temporal_downsample(&self) -> usize {
        1 << self.n_stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() < 2 {
            return Err(ModelError::Config("vae.hidden needs at least two widths".into()));
        }
        if self.in_channels == 0 || self.bottleneck_channels == 0 {
            return Err(ModelError::Config("vae channel counts must be positive".into()));
        }
        Ok(())
    }
}

pub struct Vae1d {
    pub config: VaeConfig,
    pub params: ParamSet,
}

fn conv_init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let std = (2.0 / (c_in * k) as f64).sqrt();
    Tensor::randn(&[c_out, c_in, k], rng).map(|v| v * std)
}

impl Vae1d {
    pub fn new(config: VaeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let h = &config.hidden;
        let c = config.bottleneck_channels;

        p.add("enc_in.w", conv_init(rng, h[0], config.in_channels, 3));
        p.add("enc_in.b", Tensor::zeros(&[h[0], 1]));
        for i in 0..config.n_stages() {
            p.add(format!("enc{i}.w"), conv_init(rng, h[i + 1], h[i], 3));
            p.add(format!("enc{i}.b"), Tensor::zeros(&[h[i + 1], 1]));
        }
        let top = *h.last().unwrap();
        p.add("enc_out.w", conv_init(rng, 2 * c, top, 3));
        p.add("enc_out.b", Tensor::zeros(&[2 * c, 1]));

        p.add("dec_in.w", conv_init(rng, top, c, 3));
        p.add("dec_in.b", Tensor::zeros(&[top, 1]));
        for i in 0..config.n_stages() {
            let (from, to) = (h[h.len() - 1 - i], h[h.len() - 2 - i]);
            p.add(format!("dec{i}.w"), conv_init(rng, to, from, 3));
            p.add(format!("dec{i}.b"), Tensor::zeros(&[to, 1]));
        }
        p.add("dec_out.w", conv_init(rng, config.in_channels, h[0], 3));
        p.add("dec_out.b", Tensor::zeros(&[config.in_channels, 1]));

        Ok(Self { config, params: p })
    }

    fn conv_gelu(
        tape: &mut GradTape,
        bound: &Bound,
        x: ValueId,
        name: &str,
        stride: usize,
    ) -> Result<ValueId> {
        let w = bound.id(&format!("{name}.w"));
        let b = bound.id(&format!("{name}.b"));
        let y = tape.conv1d(x, w, stride, 1)?;
        let y = tape.add(y, b)?;
        Ok(tape.gelu(y))
    }

    /// mel (channels-first [in_channels, L], L divisible by the downsample
    /// factor) -> (mean, logvar), both [c, L/downsample].
    pub fn encode(&self, tape: &mut GradTape, bound: &Bound, mel: ValueId) -> Result<(ValueId, ValueId)> {
        let shape = tape.value(mel).shape().to_vec();
        let down = self.config.temporal_downsample();
        if shape.len() != 2 || shape[0] != self.config.in_channels || shape[1] % down != 0 {
            return Err(ModelError::Config(format!(
                "encode expects [{}, k*{}], got {:?}",
                self.config.in_channels, down, shape
            )));
        }
        let mut hcur = Self::conv_gelu(tape, bound, mel, "enc_in", 1)?;
        for i in 0..self.config.n_stages() {
            hcur = Self::conv_gelu(tape, bound, hcur, &format!("enc{i}"), 2)?;
        }
        let w = bound.id("enc_out.w");
        let b = bound.id("enc_out.b");
        let out = tape.conv1d(hcur, w, 1, 1)?;
        let out = tape.add(out, b)?;
        let c = self.config.bottleneck_channels;
        let mean = tape.narrow(out, 0, 0, c)?;
        let logvar_raw = tape.narrow(out, 0, c, c)?;
        let logvar = tape.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mean, logvar))
    }

    /// z = mean + exp(logvar/2) * eps, eps ~ N(0, 1).
    pub fn reparameterize<R: Rng>(
        &self,
        tape: &mut GradTape,
        mean: ValueId,
        logvar: ValueId,
        rng: &mut R,
    ) -> ValueId {
        let noise = tape.constant(Tensor::randn(tape.value(mean).shape(), rng));
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let scaled = tape.mul(std, noise).expect("same shape");
        tape.add(mean, scaled).expect("same shape")
    }

    /// z [c, L/downsample] -> mel_hat [in_channels, L].
    pub fn decode(&self, tape: &mut GradTape, bound: &Bound, z: ValueId) -> Result<ValueId> {
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 2 || shape[0] != self.config.bottleneck_channels {
            return Err(ModelError::Config(format!(
                "decode expects [{}, l], got {:?}",
                self.config.bottleneck_channels, shape
            )));
        }
        let mut hcur = Self::conv_gelu(tape, bound, z, "dec_in", 1)?;
        for i in 0..self.config.n_stages() {
            hcur = tape.upsample_nearest(hcur, 2)?;
            hcur = Self::conv_gelu(tape, bound, hcur, &format!("dec{i}"), 1)?;
        }
        let w = bound.id("dec_out.w");
        let b = bound.id("dec_out.b");
        let out = tape.conv1d(hcur, w, 1, 1)?;
        Ok(tape.add(out, b)?)
    }

    /// Deterministic latent (posterior mean) for downstream diffusion.
    pub fn encode_mean(&self, mel: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(mel.clone());
        let (mean, _) = self.encode(&mut tape, &bound, x)?;
        Ok(tape.value(mean).clone())
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let bound = self.params.bind(&mut tape, false);
        let zid = tape.constant(z.clone());
        let out = self.decode(&mut tape, &bound, zid)?;
        Ok(tape.value(out).clone())
    }
}

/// (total, recon, kl): recon = L1, kl = 0.5 mean(exp(lv) + mean^2 - 1 - lv),
/// total = recon + beta * kl.
pub fn vae_loss(
    tape: &mut GradTape,
    target: ValueId,
    mel_hat: ValueId,
    mean: ValueId,
    logvar: ValueId,
    beta: f64,
) -> (ValueId, ValueId, ValueId) {
    let diff = tape.sub(mel_hat, target).expect("shape");
    let absdiff = tape.abs(diff);
    let recon = tape.mean_all(absdiff);

    let ev = tape.exp(logvar);
    let m2 = tape.square(mean);
    let s = tape.add(ev, m2).expect("shape");
    let s = tape.affine(s, 1.0, -1.0);
    let s = tape.sub(s, logvar).expect("shape");
    let kl_mean = tape.mean_all(s);
    let kl = tape.scale(kl_mean, 0.5);

    let weighted = tape.scale(kl, beta);
    let total = tape.add(recon, weighted).expect("scalar");
    (total, recon, kl)
}

/// Closed-form per-element KL against the standard normal.
pub fn kl_element(mean: f64, logvar: f64) -> f64 {
    0.5 * (logvar.exp() + mean * mean - 1.0 - logvar)
}

#[derive(Debug, Clone)]
pub struct VaeTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Exponential smoothing factor for the reported loss curve.
    pub smooth: f64,
    pub grad_clip: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 500, batch_size: 4, lr: 2e-3, smooth: 0.02, grad_clip: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct VaeTrainReport {
    /// (step, raw recon, smoothed recon) at every step.
    pub curve: Vec<(u64, f64, f64)>,
}

impl VaeTrainReport {
    pub fn first_smoothed(&self) -> f64 {
        self.curve.first().map(|c| c.2).unwrap_or(f64::NAN)
    }

    pub fn final_smoothed(&self) -> f64 {
        self.curve.last().map(|c| c.2).unwrap_or(f64::NAN)
    }
}

/// Train on mel clips (channels-first). Aborts with the last good parameters
/// restored if the loss goes non-finite.
pub fn train_vae(
    vae: &mut Vae1d,
    corpus: &[Tensor],
    cfg: &VaeTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<VaeTrainReport> {
    if corpus.is_empty() {
        return Err(ModelError::Config("empty training corpus".into()));
    }
    let mut opt = Lamb::new(
        LambConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() },
        &vae.params,
    );
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    let mut smoothed = f64::NAN;
    let mut last_good = vae.params.clone();

    for step in 0..cfg.steps {
        let mut tape = GradTape::new();
        let bound = vae.params.bind(&mut tape, true);
        let mut total_ids = Vec::with_capacity(cfg.batch_size);
        let mut recon_ids = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..corpus.len());
            let target = tape.constant(corpus[idx].clone());
            let (mean, logvar) = vae.encode(&mut tape, &bound, target)?;
            let z = vae.reparameterize(&mut tape, mean, logvar, rng);
            let mel_hat = vae.decode(&mut tape, &bound, z)?;
            let (total, recon, _) =
                vae_loss(&mut tape, target, mel_hat, mean, logvar, vae.config.kl_weight);
            total_ids.push(total);
            recon_ids.push(recon);
        }
        let mut batch_total = total_ids[0];
        for &t in &total_ids[1..] {
            batch_total = tape.add(batch_total, t)?;
        }
        let batch_total = tape.scale(batch_total, 1.0 / cfg.batch_size as f64);
        let recon_now: f64 =
            recon_ids.iter().map(|&r| tape.value(r).item()).sum::<f64>() / cfg.batch_size as f64;

        if !tape.value(batch_total).item().is_finite() {
            vae.params = last_good;
            return Err(ModelError::Diverged { step, reason: "non-finite loss".into() });
        }

        tape.backward(batch_total)?;
        let mut grads = vae.params.grads(&tape, &bound);
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut vae.params, &grads, cfg.lr);

        smoothed = if smoothed.is_nan() {
            recon_now
        } else {
            (1.0 - cfg.smooth) * smoothed + cfg.smooth * recon_now
        };
        curve.push((step, recon_now, smoothed));
        if step % 50 == 0 {
            last_good = vae.params.clone();
        }
    }
    Ok(VaeTrainReport { curve })
}
