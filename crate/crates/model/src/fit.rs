//! FIT denoiser: patch tokens in contiguous groups, local self-attention per
//! group, then conditioning cross-attention, read, global self-attention,
//! and write through a small set of learned latent tokens.
//!
//! Grouping is a view: parameters never depend on the group size or the
//! patch count. Information crosses groups only through the write step, so
//! disabling write isolates groups exactly.

use aural_core::{GradTape, Tensor, ValueId, LAYER_NORM_EPS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::ConditioningBundle;
use crate::error::{ModelError, Result};
use crate::params::{Bound, ParamSet};

const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Channels of the incoming latent sequence.
    pub in_channels: usize,
    pub patch_size: usize,
    pub group_size: usize,
    pub n_latent_tokens: usize,
    pub n_blocks: usize,
    /// Local self-attention layers per block.
    pub local_layers: usize,
    /// Global self-attention layers per block.
    pub global_layers: usize,
    pub d_patch: usize,
    pub d_latent: usize,
    pub d_cond: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Capacity of the learned patch-position table (after group padding).
    pub max_patches: usize,
    /// Rows of the dataset-ID embedding, including the reserved null row.
    pub n_dataset_ids: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            in_channels: 64,
            patch_size: 1,
            group_size: 32,
            n_latent_tokens: 64,
            n_blocks: 4,
            local_layers: 2,
            global_layers: 2,
            d_patch: 128,
            d_latent: 128,
            d_cond: 256,
            heads: 4,
            dropout: 0.1,
            max_patches: 128,
            n_dataset_ids: 4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.patch_size == 1 || self.patch_size == 2) {
            return Err(ModelError::Config(format!("patch_size {} not in {{1, 2}}", self.patch_size)));
        }
        if self.group_size == 0 {
            return Err(ModelError::Config("group_size must be >= 1".into()));
        }
        for (name, d) in [("d_patch", self.d_patch), ("d_latent", self.d_latent)] {
            if d % self.heads != 0 {
                return Err(ModelError::Config(format!("{name} {} not divisible by heads {}", d, self.heads)));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.n_dataset_ids < 2 {
            return Err(ModelError::Config("need the null row plus at least one dataset id".into()));
        }
        Ok(())
    }

    /// Token count for a latent of length `l`: ceil(l / patch_size).
    pub fn n_patches(&self, l: usize) -> usize {
        l.div_ceil(self.patch_size)
    }

    /// Token count padded up to whole groups.
    pub fn n_padded(&self, l: usize) -> usize {
        self.n_patches(l).div_ceil(self.group_size) * self.group_size
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub train: bool,
    /// Zero out the write path; used by the locality probes.
    pub disable_write: bool,
}

// ── Pure tokenization view (no parameters) ──────────────────────────

/// [c, L] -> [ceil(L/p), p*c], zero-padding a trailing partial patch.
pub fn patchify(z: &Tensor, p: usize) -> Tensor {
    let (c, l) = (z.shape()[0], z.shape()[1]);
    let n = l.div_ceil(p);
    let mut data = vec![0.0; n * p * c];
    for t in 0..l {
        for ch in 0..c {
            // token t/p, slot (t%p)*c + ch
            data[(t / p) * p * c + (t % p) * c + ch] = z.get(&[ch, t]);
        }
    }
    Tensor::new(vec![n, p * c], data).expect("patch shape")
}

/// Inverse of `patchify`, dropping the padded remainder.
pub fn unpatchify(tokens: &Tensor, p: usize, c: usize, l: usize) -> Tensor {
    let mut out = Tensor::zeros(&[c, l]);
    for t in 0..l {
        for ch in 0..c {
            let v = tokens.get(&[t / p, (t % p) * c + ch]);
            out.set(&[ch, t], v);
        }
    }
    out
}

// ── Attention ───────────────────────────────────────────────────────

struct AttnIds {
    wq: ValueId,
    wk: ValueId,
    wv: ValueId,
    wo: ValueId,
    bq: ValueId,
    bk: ValueId,
    bv: ValueId,
    bo: ValueId,
}

fn attn_ids(bound: &Bound, prefix: &str) -> AttnIds {
    AttnIds {
        wq: bound.id(&format!("{prefix}.wq")),
        wk: bound.id(&format!("{prefix}.wk")),
        wv: bound.id(&format!("{prefix}.wv")),
        wo: bound.id(&format!("{prefix}.wo")),
        bq: bound.id(&format!("{prefix}.bq")),
        bk: bound.id(&format!("{prefix}.bk")),
        bv: bound.id(&format!("{prefix}.bv")),
        bo: bound.id(&format!("{prefix}.bo")),
    }
}

/// Multi-head attention: q [B, Tq, Dq], kv [Bk, Tk, Dk] with Bk in {1, B}.
/// `key_mask`, when present, is broadcast-added to the scores pre-softmax.
fn attention(
    tape: &mut GradTape,
    q: ValueId,
    kv: ValueId,
    ids: &AttnIds,
    heads: usize,
    key_mask: Option<ValueId>,
) -> Result<ValueId> {
    let (b, tq, dq) = {
        let s = tape.value(q).shape();
        (s[0], s[1], s[2])
    };
    let (bk, tk) = {
        let s = tape.value(kv).shape();
        (s[0], s[1])
    };
    let dh = dq / heads;

    let split = |tape: &mut GradTape, x: ValueId, batch: usize, t: usize| -> Result<ValueId> {
        let r = tape.reshape(x, vec![batch, t, heads, dh])?;
        Ok(tape.permute(r, &[0, 2, 1, 3])?)
    };

    let qp = tape.matmul(q, ids.wq)?;
    let qp = tape.add(qp, ids.bq)?;
    let qh = split(tape, qp, b, tq)?;

    let kp = tape.matmul(kv, ids.wk)?;
    let kp = tape.add(kp, ids.bk)?;
    let kh = split(tape, kp, bk, tk)?;
    let kt = tape.permute(kh, &[0, 1, 3, 2])?;

    let vp = tape.matmul(kv, ids.wv)?;
    let vp = tape.add(vp, ids.bv)?;
    let vh = split(tape, vp, bk, tk)?;

    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = match key_mask {
        Some(m) => tape.add(scores, m)?,
        None => scores,
    };
    let probs = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(probs, vh)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, vec![b, tq, dq])?;
    let out = tape.matmul(ctx, ids.wo)?;
    Ok(tape.add(out, ids.bo)?)
}

pub struct FitModel {
    pub config: FitConfig,
    pub params: ParamSet,
}

fn linear_init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Tensor {
    Tensor::randn(&[d_in, d_out], rng).map(|v| v * 0.02)
}

impl FitModel {
    pub fn new(config: FitConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let (dp, dl, dc) = (config.d_patch, config.d_latent, config.d_cond);

        p.add("proj_in.w", linear_init(rng, config.patch_size * config.in_channels, dp));
        p.add("proj_in.b", Tensor::zeros(&[dp]));
        p.add("pos_patch", Tensor::randn(&[config.max_patches, dp], rng).map(|v| v * 0.02));
        p.add("latent_init", Tensor::randn(&[config.n_latent_tokens, dl], rng).map(|v| v * 0.02));
        p.add("ds_embed", Tensor::randn(&[config.n_dataset_ids, dc], rng).map(|v| v * 0.02));

        let add_ln = |p: &mut ParamSet, name: String, d: usize| {
            p.add(format!("{name}.g"), Tensor::ones(&[d]));
            p.add(format!("{name}.b"), Tensor::zeros(&[d]));
        };
        let add_attn = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: String, dq: usize, dk: usize| {
            p.add(format!("{name}.wq"), linear_init(rng, dq, dq));
            p.add(format!("{name}.bq"), Tensor::zeros(&[dq]));
            p.add(format!("{name}.wk"), linear_init(rng, dk, dq));
            p.add(format!("{name}.bk"), Tensor::zeros(&[dq]));
            p.add(format!("{name}.wv"), linear_init(rng, dk, dq));
            p.add(format!("{name}.bv"), Tensor::zeros(&[dq]));
            p.add(format!("{name}.wo"), linear_init(rng, dq, dq));
            p.add(format!("{name}.bo"), Tensor::zeros(&[dq]));
        };
        let add_ffn = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: String, d: usize| {
            p.add(format!("{name}.w1"), linear_init(rng, d, 4 * d));
            p.add(format!("{name}.b1"), Tensor::zeros(&[4 * d]));
            p.add(format!("{name}.w2"), linear_init(rng, 4 * d, d));
            p.add(format!("{name}.b2"), Tensor::zeros(&[d]));
        };

        for b in 0..config.n_blocks {
            for l in 0..config.local_layers {
                add_ln(&mut p, format!("b{b}.local{l}.ln1"), dp);
                add_attn(&mut p, rng, format!("b{b}.local{l}.attn"), dp, dp);
                add_ln(&mut p, format!("b{b}.local{l}.ln2"), dp);
                add_ffn(&mut p, rng, format!("b{b}.local{l}.ffn"), dp);
            }
            add_ln(&mut p, format!("b{b}.cond.ln_q"), dl);
            add_ln(&mut p, format!("b{b}.cond.ln_kv"), dc);
            add_attn(&mut p, rng, format!("b{b}.cond"), dl, dc);

            add_ln(&mut p, format!("b{b}.read.ln_q"), dl);
            add_ln(&mut p, format!("b{b}.read.ln_kv"), dp);
            add_attn(&mut p, rng, format!("b{b}.read"), dl, dp);

            for l in 0..config.global_layers {
                add_ln(&mut p, format!("b{b}.global{l}.ln1"), dl);
                add_attn(&mut p, rng, format!("b{b}.global{l}.attn"), dl, dl);
                add_ln(&mut p, format!("b{b}.global{l}.ln2"), dl);
                add_ffn(&mut p, rng, format!("b{b}.global{l}.ffn"), dl);
            }

            add_ln(&mut p, format!("b{b}.write.ln_q"), dp);
            add_ln(&mut p, format!("b{b}.write.ln_kv"), dl);
            add_attn(&mut p, rng, format!("b{b}.write"), dp, dl);
        }

        add_ln(&mut p, "out.ln".to_string(), dp);
        // Zero-initialized head: epsilon prediction starts at exactly zero.
        p.add("out.w", Tensor::zeros(&[dp, config.patch_size * config.in_channels]));
        p.add("out.b", Tensor::zeros(&[config.patch_size * config.in_channels]));

        Ok(Self { config, params: p })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_scalars()
    }

    fn ln(tape: &mut GradTape, bound: &Bound, name: &str, x: ValueId) -> Result<ValueId> {
        let g = bound.id(&format!("{name}.g"));
        let b = bound.id(&format!("{name}.b"));
        Ok(tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }

    fn maybe_dropout<R: Rng>(
        &self,
        tape: &mut GradTape,
        x: ValueId,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> ValueId {
        if opts.train && self.config.dropout > 0.0 {
            tape.dropout(x, self.config.dropout, rng)
        } else {
            x
        }
    }

    /// Pre-norm self-attention + FFN with residuals.
    #[allow(clippy::too_many_arguments)]
    fn self_attn_layer<R: Rng>(
        &self,
        tape: &mut GradTape,
        bound: &Bound,
        prefix: &str,
        x: ValueId,
        key_mask: Option<ValueId>,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ValueId> {
        let h = Self::ln(tape, bound, &format!("{prefix}.ln1"), x)?;
        let ids = attn_ids(bound, &format!("{prefix}.attn"));
        let a = attention(tape, h, h, &ids, self.config.heads, key_mask)?;
        let a = self.maybe_dropout(tape, a, opts, rng);
        let x = tape.add(x, a)?;

        let h2 = Self::ln(tape, bound, &format!("{prefix}.ln2"), x)?;
        let w1 = bound.id(&format!("{prefix}.ffn.w1"));
        let b1 = bound.id(&format!("{prefix}.ffn.b1"));
        let w2 = bound.id(&format!("{prefix}.ffn.w2"));
        let b2 = bound.id(&format!("{prefix}.ffn.b2"));
        let f = tape.matmul(h2, w1)?;
        let f = tape.add(f, b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add(f, b2)?;
        let f = self.maybe_dropout(tape, f, opts, rng);
        Ok(tape.add(x, f)?)
    }

    /// Pre-norm cross-attention with a residual on the query side.
    #[allow(clippy::too_many_arguments)]
    fn cross_attn<R: Rng>(
        &self,
        tape: &mut GradTape,
        bound: &Bound,
        prefix: &str,
        q: ValueId,
        kv: ValueId,
        key_mask: Option<ValueId>,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ValueId> {
        let hq = Self::ln(tape, bound, &format!("{prefix}.ln_q"), q)?;
        let hkv = Self::ln(tape, bound, &format!("{prefix}.ln_kv"), kv)?;
        let ids = attn_ids(bound, prefix);
        let a = attention(tape, hq, hkv, &ids, self.config.heads, key_mask)?;
        let a = self.maybe_dropout(tape, a, opts, rng);
        Ok(tape.add(q, a)?)
    }

    /// Conditioning rows seq ‖ global ‖ t ‖ ds as [1, S+3, d_cond]; the ds
    /// row comes from the learned table so it keeps its gradient path.
    fn cond_rows(
        &self,
        tape: &mut GradTape,
        bound: &Bound,
        cond: &ConditioningBundle,
    ) -> Result<ValueId> {
        if cond.d_c != self.config.d_cond {
            return Err(ModelError::Config(format!(
                "conditioning width {} != model d_cond {}",
                cond.d_c, self.config.d_cond
            )));
        }
        if cond.dataset_index >= self.config.n_dataset_ids {
            return Err(ModelError::Config(format!(
                "dataset index {} outside embedding table of {} rows",
                cond.dataset_index, self.config.n_dataset_ids
            )));
        }
        let seq = tape.constant(cond.seq.clone());
        let global = tape.constant(cond.global.clone());
        let temb = tape.constant(cond.t_embed.clone());
        let table = bound.id("ds_embed");
        let ds = tape.narrow(table, 0, cond.dataset_index, 1)?;
        let rows = tape.concat(0, &[seq, global, temb, ds])?;
        let n = cond.n_rows();
        tape.reshape(rows, vec![1, n, self.config.d_cond]).map_err(Into::into)
    }

    /// Denoise one latent: z_t [c, L] -> epsilon_hat [c, L].
    pub fn forward<R: Rng>(
        &self,
        tape: &mut GradTape,
        bound: &Bound,
        z_t: ValueId,
        cond: &ConditioningBundle,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ValueId> {
        let cfg = &self.config;
        let shape = tape.value(z_t).shape().to_vec();
        if shape.len() != 2 || shape[0] != cfg.in_channels {
            return Err(ModelError::Config(format!(
                "forward expects [{}, L], got {:?}",
                cfg.in_channels, shape
            )));
        }
        let l = shape[1];
        let p = cfg.patch_size;
        let n_p = cfg.n_patches(l);
        let n_pad = cfg.n_padded(l);
        let g = cfg.group_size;
        let groups = n_pad / g;
        if n_pad > cfg.max_patches {
            return Err(ModelError::Config(format!(
                "{} padded patches exceed max_patches {}",
                n_pad, cfg.max_patches
            )));
        }

        // Tokenize: [c, L] -> [N_p, p*c] -> project -> pad -> + positions.
        let zt = tape.transpose(z_t)?; // [L, c]
        let tokens_raw = if p == 1 {
            zt
        } else {
            let rem = n_p * p - l;
            let padded = if rem > 0 {
                let zeros = tape.constant(Tensor::zeros(&[rem, cfg.in_channels]));
                tape.concat(0, &[zt, zeros])?
            } else {
                zt
            };
            tape.reshape(padded, vec![n_p, p * cfg.in_channels])?
        };
        let w_in = bound.id("proj_in.w");
        let b_in = bound.id("proj_in.b");
        let projected = tape.matmul(tokens_raw, w_in)?;
        let projected = tape.add(projected, b_in)?;
        let padded = if n_pad > n_p {
            let zeros = tape.constant(Tensor::zeros(&[n_pad - n_p, cfg.d_patch]));
            tape.concat(0, &[projected, zeros])?
        } else {
            projected
        };
        let pos_table = bound.id("pos_patch");
        let pos = tape.narrow(pos_table, 0, 0, n_pad)?;
        let tokens = tape.add(padded, pos)?;
        let mut patches = tape.reshape(tokens, vec![groups, g, cfg.d_patch])?;

        // Pad positions never act as keys.
        let mut local_mask = Tensor::zeros(&[groups, 1, 1, g]);
        for i in n_p..n_pad {
            local_mask.set(&[i / g, 0, 0, i % g], MASK_NEG);
        }
        let local_mask = tape.constant(local_mask);
        let mut read_mask = Tensor::zeros(&[1, 1, 1, n_pad]);
        for i in n_p..n_pad {
            read_mask.set(&[0, 0, 0, i], MASK_NEG);
        }
        let read_mask = tape.constant(read_mask);

        let latent_init = bound.id("latent_init");
        let mut latents =
            tape.reshape(latent_init, vec![1, cfg.n_latent_tokens, cfg.d_latent])?;
        let cond_rows = self.cond_rows(tape, bound, cond)?;

        for b in 0..cfg.n_blocks {
            for layer in 0..cfg.local_layers {
                patches = self.self_attn_layer(
                    tape,
                    bound,
                    &format!("b{b}.local{layer}"),
                    patches,
                    Some(local_mask),
                    opts,
                    rng,
                )?;
            }
            latents = self.cross_attn(
                tape,
                bound,
                &format!("b{b}.cond"),
                latents,
                cond_rows,
                None,
                opts,
                rng,
            )?;
            let flat = tape.reshape(patches, vec![1, n_pad, cfg.d_patch])?;
            latents = self.cross_attn(
                tape,
                bound,
                &format!("b{b}.read"),
                latents,
                flat,
                Some(read_mask),
                opts,
                rng,
            )?;
            for layer in 0..cfg.global_layers {
                latents = self.self_attn_layer(
                    tape,
                    bound,
                    &format!("b{b}.global{layer}"),
                    latents,
                    None,
                    opts,
                    rng,
                )?;
            }
            if !opts.disable_write {
                let written = self.cross_attn(
                    tape,
                    bound,
                    &format!("b{b}.write"),
                    flat,
                    latents,
                    None,
                    opts,
                    rng,
                )?;
                patches = tape.reshape(written, vec![groups, g, cfg.d_patch])?;
            }
        }

        let flat = tape.reshape(patches, vec![n_pad, cfg.d_patch])?;
        let real = tape.narrow(flat, 0, 0, n_p)?;
        let normed = Self::ln(tape, bound, "out.ln", real)?;
        let w_out = bound.id("out.w");
        let b_out = bound.id("out.b");
        let out = tape.matmul(normed, w_out)?;
        let out = tape.add(out, b_out)?; // [N_p, p*c]
        let seq = tape.reshape(out, vec![n_p * p, cfg.in_channels])?;
        let seq = tape.narrow(seq, 0, 0, l)?;
        Ok(tape.transpose(seq)?)
    }

    /// Inference convenience: plain tensors in and out.
    pub fn predict(&self, z_t: &Tensor, cond: &ConditioningBundle) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let bound = self.params.bind(&mut tape, false);
        let z = tape.constant(z_t.clone());
        let mut rng = aural_core::seeded_rng(0); // dropout off in eval: rng unused
        let out = self.forward(&mut tape, &bound, z, cond, &ForwardOptions::default(), &mut rng)?;
        Ok(tape.value(out).clone())
    }

    /// Verification hook: one local attention sublayer (pre-norm + attention,
    /// no residual, no padding) over tokens [N, d_patch] grouped at
    /// `group_size`. N must divide evenly into groups.
    pub fn probe_local_attention(
        &self,
        tokens: &Tensor,
        block: usize,
        layer: usize,
        group_size: usize,
    ) -> Result<Tensor> {
        let n = tokens.shape()[0];
        if n % group_size != 0 {
            return Err(ModelError::Config(format!(
                "probe needs N divisible by group size, got {n} / {group_size}"
            )));
        }
        let d = self.config.d_patch;
        let mut tape = GradTape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(tokens.clone());
        let grouped = tape.reshape(x, vec![n / group_size, group_size, d])?;
        let h = Self::ln(&mut tape, &bound, &format!("b{block}.local{layer}.ln1"), grouped)?;
        let ids = attn_ids(&bound, &format!("b{block}.local{layer}.attn"));
        let a = attention(&mut tape, h, h, &ids, self.config.heads, None)?;
        let flat = tape.reshape(a, vec![n, d])?;
        Ok(tape.value(flat).clone())
    }

    /// Forward FLOPs for a latent of length `l`, counted by the tape.
    pub fn forward_flops(&self, l: usize, cond: &ConditioningBundle) -> Result<u64> {
        let mut tape = GradTape::new();
        let bound = self.params.bind(&mut tape, false);
        let z = tape.constant(Tensor::zeros(&[self.config.in_channels, l]));
        let mut rng = aural_core::seeded_rng(0);
        self.forward(&mut tape, &bound, z, cond, &ForwardOptions::default(), &mut rng)?;
        Ok(tape.flops())
    }
}

/// Least-squares fit of flops = a * n_patches + b.
#[derive(Debug, Clone)]
pub struct FlopReport {
    pub n_patches: Vec<usize>,
    pub flops: Vec<u64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Measure forward FLOPs across patch counts (fixed group size and latent
/// token count) and fit the linear model.
pub fn flop_linearity(model: &FitModel, cond: &ConditioningBundle, n_patches: &[usize]) -> Result<FlopReport> {
    let p = model.config.patch_size;
    let mut flops = Vec::with_capacity(n_patches.len());
    for &n in n_patches {
        flops.push(model.forward_flops(n * p, cond)?);
    }
    let xs: Vec<f64> = n_patches.iter().map(|&n| n as f64).collect();
    let ys: Vec<f64> = flops.iter().map(|&f| f as f64).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let p = slope * x + intercept;
            (y - p) * (y - p)
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r_squared = 1.0 - ss_res / ss_tot.max(1e-12);
    Ok(FlopReport { n_patches: n_patches.to_vec(), flops, slope, intercept, r_squared })
}
