//! LAMB optimizer with layer-wise trust ratios, plus gradient clipping and
//! the cosine learning-rate schedule.

use aural_core::Tensor;

use crate::params::ParamSet;

#[derive(Debug, Clone)]
pub struct LambConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_trust_ratio: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.1,
            max_trust_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A NaN/Inf gradient arrived; the whole step was skipped.
    SkippedNonFinite,
}

/// Adam-style moments with a per-parameter (layer-wise) trust ratio
/// `||w|| / ||update + wd*w||`, clamped to [0, max]. Parameters or updates
/// with zero norm fall back to ratio 1 so zero-initialized tensors can move.
pub struct Lamb {
    pub config: LambConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Lamb {
    pub fn new(config: LambConfig, params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { config, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. `grads` is in registration order;
    /// `None` entries leave the parameter and its moments untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>], lr: f64) -> StepOutcome {
        assert_eq!(grads.len(), params.len());
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return StepOutcome::SkippedNonFinite;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for (i, (_, w)) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let gd = g.data();
            let wd = w.data_mut();

            let mut update_sq = 0.0;
            let mut weight_sq = 0.0;
            let mut update = vec![0.0; wd.len()];
            for j in 0..wd.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gd[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gd[j] * gd[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let u = m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * wd[j];
                update[j] = u;
                update_sq += u * u;
                weight_sq += wd[j] * wd[j];
            }
            let w_norm = weight_sq.sqrt();
            let u_norm = update_sq.sqrt();
            let ratio = if w_norm > 0.0 && u_norm > 0.0 {
                (w_norm / u_norm).clamp(0.0, c.max_trust_ratio)
            } else {
                1.0
            };
            for j in 0..wd.len() {
                wd[j] -= lr * ratio * update[j];
            }
        }
        StepOutcome::Applied
    }

    /// Moment tensors for checkpointing, in registration order.
    pub fn state_entries<'a>(&'a self, params: &'a ParamSet) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::new();
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("opt.m.{name}"), &self.m[i]));
            out.push((format!("opt.v.{name}"), &self.v[i]));
        }
        out
    }

    pub fn restore_state(
        &mut self,
        params: &ParamSet,
        loaded: &[(String, Tensor)],
        step: u64,
    ) -> crate::error::Result<()> {
        for (i, (name, _)) in params.iter().enumerate() {
            for (slot, key) in [(&mut self.m[i], format!("opt.m.{name}")), (&mut self.v[i], format!("opt.v.{name}"))]
            {
                let Some((_, t)) = loaded.iter().find(|(n, _)| *n == key) else {
                    return Err(crate::error::ModelError::Config(format!(
                        "checkpoint missing optimizer tensor {key:?}"
                    )));
                };
                *slot = t.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
