//! Structural probes of the FIT backbone: grouping is a view, information
//! crosses groups only through write, local attention matches a full
//! attention oracle when there is a single group, and compute scales
//! linearly in the patch count.

use aural_core::{seeded_rng, GradTape, Tensor};
use aural_model::conditioning::{build_conditioning, ConditioningBundle, DatasetRegistry};
use aural_model::fit::{flop_linearity, patchify, unpatchify, FitConfig, FitModel, ForwardOptions};
use aural_model::params::Bound;
use rand_chacha::ChaCha8Rng;

fn registry() -> DatasetRegistry {
    DatasetRegistry::new(&["audiocaps".into(), "clotho".into()]).unwrap()
}

fn small_config() -> FitConfig {
    FitConfig {
        in_channels: 6,
        patch_size: 1,
        group_size: 4,
        n_latent_tokens: 6,
        n_blocks: 2,
        local_layers: 1,
        global_layers: 1,
        d_patch: 16,
        d_latent: 16,
        d_cond: 16,
        heads: 2,
        dropout: 0.0,
        max_patches: 32,
        n_dataset_ids: 3,
    }
}

fn small_model(seed: u64) -> (FitModel, ChaCha8Rng) {
    let mut rng = seeded_rng(seed);
    let mut model = FitModel::new(small_config(), &mut rng).unwrap();
    randomize_head(&mut model, &mut rng);
    (model, rng)
}

/// The output head starts at zero (for the epsilon objective), which would
/// make sensitivity probes vacuous; give it real values.
fn randomize_head(model: &mut FitModel, rng: &mut ChaCha8Rng) {
    let w_shape = model.params.get("out.w").shape().to_vec();
    let b_shape = model.params.get("out.b").shape().to_vec();
    *model.params.get_mut("out.w") = Tensor::randn(&w_shape, rng).map(|v| v * 0.05);
    *model.params.get_mut("out.b") = Tensor::randn(&b_shape, rng).map(|v| v * 0.05);
}

fn cond_for(model: &FitModel, text: &str, t: usize) -> ConditioningBundle {
    build_conditioning(text, t, "audiocaps", &registry(), model.config.d_cond).unwrap()
}

#[test]
fn patchify_round_trip_is_exact() {
    let mut rng = seeded_rng(1);
    for (c, l, p) in [(6usize, 16usize, 1usize), (6, 16, 2), (6, 15, 2), (3, 7, 2)] {
        let z = Tensor::randn(&[c, l], &mut rng);
        let tokens = patchify(&z, p);
        assert_eq!(tokens.shape(), &[l.div_ceil(p), p * c]);
        let back = unpatchify(&tokens, p, c, l);
        assert_eq!(back.data(), z.data());
    }
}

#[test]
fn canonical_shapes_and_group_arithmetic() {
    let cfg = FitConfig::default();
    // 125 latent steps at patch 1, group 32: 4 groups, padded 125 -> 128.
    assert_eq!(cfg.n_patches(125), 125);
    assert_eq!(cfg.n_padded(125), 128);
    // patch 2 halves the token count (ceil): 63 tokens, one slot padded.
    let cfg2 = FitConfig { patch_size: 2, ..cfg };
    assert_eq!(cfg2.n_patches(125), 63);
}

#[test]
fn forward_preserves_canonical_shape() {
    let cfg = FitConfig {
        d_patch: 32,
        d_latent: 32,
        d_cond: 32,
        n_blocks: 2,
        n_latent_tokens: 8,
        ..FitConfig::default()
    };
    let mut rng = seeded_rng(2);
    let model = FitModel::new(cfg, &mut rng).unwrap();
    let z = Tensor::randn(&[64, 125], &mut rng);
    let cond = cond_for(&model, "water dripping in a cave", 17);
    let out = model.predict(&z, &cond).unwrap();
    assert_eq!(out.shape(), &[64, 125]);
    assert!(out.all_finite());
}

#[test]
fn forward_rejects_wrong_channels() {
    let (model, mut rng) = small_model(3);
    let z = Tensor::randn(&[5, 16], &mut rng);
    let cond = cond_for(&model, "x", 0);
    assert!(model.predict(&z, &cond).is_err());
}

/// Outputs grouped by the model's group size, as flat [N, d] rows -> groups.
fn run_model(model: &FitModel, z: &Tensor, cond: &ConditioningBundle, disable_write: bool) -> Tensor {
    let mut tape = GradTape::new();
    let bound = model.params.bind(&mut tape, false);
    let zid = tape.constant(z.clone());
    let mut rng = seeded_rng(0);
    let out = model
        .forward(
            &mut tape,
            &bound,
            zid,
            cond,
            &ForwardOptions { train: false, disable_write },
            &mut rng,
        )
        .unwrap();
    tape.value(out).clone()
}

#[test]
fn pre_write_cross_group_sensitivity_is_exactly_zero() {
    let (model, mut rng) = small_model(4);
    let g = model.config.group_size;
    let l = 16usize; // 4 groups of 4
    let z = Tensor::randn(&[6, l], &mut rng);
    let cond = cond_for(&model, "wind in the trees", 11);
    let base = run_model(&model, &z, &cond, true);

    // Perturb every time step belonging to group 2.
    let mut z2 = z.clone();
    for t in 2 * g..3 * g {
        for ch in 0..6 {
            z2.set(&[ch, t], z2.get(&[ch, t]) + 3.5);
        }
    }
    let out2 = run_model(&model, &z2, &cond, true);
    for t in 0..l {
        let same_group = (2 * g..3 * g).contains(&t);
        for ch in 0..6 {
            let (a, b) = (base.get(&[ch, t]), out2.get(&[ch, t]));
            if same_group {
                continue;
            }
            assert_eq!(a.to_bits(), b.to_bits(), "t={t} ch={ch} leaked across groups");
        }
    }
}

#[test]
fn post_block_sensitivity_reaches_every_group() {
    let (model, mut rng) = small_model(5);
    let g = model.config.group_size;
    let l = 16usize;
    let z = Tensor::randn(&[6, l], &mut rng);
    let cond = cond_for(&model, "rolling thunder", 23);
    let base = run_model(&model, &z, &cond, false);

    let mut z2 = z.clone();
    z2.set(&[0, 2 * g], z2.get(&[0, 2 * g]) + 1.0); // one patch in group 2
    let out2 = run_model(&model, &z2, &cond, false);
    for group in 0..l / g {
        let changed = (group * g..(group + 1) * g).any(|t| {
            (0..6).any(|ch| base.get(&[ch, t]) != out2.get(&[ch, t]))
        });
        assert!(changed, "group {group} never felt the perturbation");
    }
}

#[test]
fn zeroed_write_value_path_is_residual_identity() {
    let (mut model, mut rng) = small_model(6);
    // Zero the write value/output path in every block.
    for b in 0..model.config.n_blocks {
        for name in [format!("b{b}.write.wv"), format!("b{b}.write.bv"), format!("b{b}.write.wo"), format!("b{b}.write.bo")] {
            let t = model.params.get_mut(&name);
            let zero = Tensor::zeros(t.shape());
            *t = zero;
        }
    }
    let z = Tensor::randn(&[6, 16], &mut rng);
    let cond = cond_for(&model, "crackling fire", 3);
    let with_write = run_model(&model, &z, &cond, false);
    let without_write = run_model(&model, &z, &cond, true);
    assert!(with_write
        .data()
        .iter()
        .zip(without_write.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn zeroed_cond_value_path_makes_output_text_invariant() {
    let (mut model, mut rng) = small_model(7);
    for b in 0..model.config.n_blocks {
        for name in [format!("b{b}.cond.wv"), format!("b{b}.cond.bv"), format!("b{b}.cond.wo"), format!("b{b}.cond.bo")] {
            let t = model.params.get_mut(&name);
            let zero = Tensor::zeros(t.shape());
            *t = zero;
        }
    }
    let z = Tensor::randn(&[6, 16], &mut rng);
    let a = run_model(&model, &z, &cond_for(&model, "dogs barking", 9), false);
    let b = run_model(&model, &z, &cond_for(&model, "cats meowing loudly", 9), false);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn conditioning_changes_reach_the_output() {
    let (model, mut rng) = small_model(8);
    let z = Tensor::randn(&[6, 16], &mut rng);
    let reg = registry();
    let d_c = model.config.d_cond;
    let base = model
        .predict(&z, &build_conditioning("dog", 5, "audiocaps", &reg, d_c).unwrap())
        .unwrap();
    let other_text = model
        .predict(&z, &build_conditioning("cat", 5, "audiocaps", &reg, d_c).unwrap())
        .unwrap();
    let other_ds = model
        .predict(&z, &build_conditioning("dog", 5, "clotho", &reg, d_c).unwrap())
        .unwrap();
    assert_ne!(base.data(), other_text.data());
    assert_ne!(base.data(), other_ds.data());
}

// ── Full-attention oracle ───────────────────────────────────────────

fn ln_oracle(x: &[f64], n: usize, d: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    out
}

/// Plain full self-attention over all N tokens, written with naive loops.
#[allow(clippy::too_many_arguments)]
fn full_attention_oracle(
    x: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    wq: &[f64],
    bq: &[f64],
    wk: &[f64],
    bk: &[f64],
    wv: &[f64],
    bv: &[f64],
    wo: &[f64],
    bo: &[f64],
) -> Vec<f64> {
    let dh = d / heads;
    let proj = |w: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let mut s = b[j];
                for k in 0..d {
                    s += x[i * d + k] * w[k * d + j];
                }
                out[i * d + j] = s;
            }
        }
        out
    };
    let q = proj(wq, bq);
    let k = proj(wk, bk);
    let v = proj(wv, bv);

    let mut ctx = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for e in 0..dh {
                    s += q[i * d + h * dh + e] * k[j * d + h * dh + e];
                }
                scores[j] = s / (dh as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let tot: f64 = exps.iter().sum();
            for e in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] / tot * v[j * d + h * dh + e];
                }
                ctx[i * d + h * dh + e] = acc;
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let mut s = bo[j];
            for k2 in 0..d {
                s += ctx[i * d + k2] * wo[k2 * d + j];
            }
            out[i * d + j] = s;
        }
    }
    out
}

#[test]
fn single_group_local_attention_matches_full_attention_oracle() {
    let (model, mut rng) = small_model(9);
    let n = 12usize;
    let d = model.config.d_patch;
    let tokens = Tensor::randn(&[n, d], &mut rng);

    // Single group: group size covers all tokens.
    let got = model.probe_local_attention(&tokens, 0, 0, n).unwrap();

    let p = &model.params;
    let normed = ln_oracle(
        tokens.data(),
        n,
        d,
        p.get("b0.local0.ln1.g").data(),
        p.get("b0.local0.ln1.b").data(),
        1e-5,
    );
    let expected = full_attention_oracle(
        &normed,
        n,
        d,
        model.config.heads,
        p.get("b0.local0.attn.wq").data(),
        p.get("b0.local0.attn.bq").data(),
        p.get("b0.local0.attn.wk").data(),
        p.get("b0.local0.attn.bk").data(),
        p.get("b0.local0.attn.wv").data(),
        p.get("b0.local0.attn.bv").data(),
        p.get("b0.local0.attn.wo").data(),
        p.get("b0.local0.attn.bo").data(),
    );
    let max_err = got
        .data()
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_err < 1e-10, "max abs diff {max_err}");

    // Grouped attention must differ from full attention (it masks nothing
    // but sees fewer keys per query).
    let grouped = model.probe_local_attention(&tokens, 0, 0, 4).unwrap();
    assert_ne!(grouped.data(), got.data());
}

#[test]
fn grouped_probe_isolates_groups_bit_exactly() {
    let (model, mut rng) = small_model(10);
    let n = 12usize;
    let d = model.config.d_patch;
    let tokens = Tensor::randn(&[n, d], &mut rng);
    let base = model.probe_local_attention(&tokens, 0, 0, 4).unwrap();

    let mut other = tokens.clone();
    for j in 0..d {
        other.set(&[5, j], other.get(&[5, j]) - 2.0); // token 5 lives in group 1
    }
    let changed = model.probe_local_attention(&other, 0, 0, 4).unwrap();
    for t in 0..n {
        let same_group = (4..8).contains(&t);
        for j in 0..d {
            if same_group {
                continue;
            }
            assert_eq!(
                base.get(&[t, j]).to_bits(),
                changed.get(&[t, j]).to_bits(),
                "token {t} leaked"
            );
        }
    }
}

// ── Complexity ──────────────────────────────────────────────────────

#[test]
fn flops_scale_linearly_in_patch_count() {
    let cfg = FitConfig {
        in_channels: 4,
        patch_size: 1,
        group_size: 32,
        n_latent_tokens: 64,
        n_blocks: 2,
        local_layers: 1,
        global_layers: 1,
        d_patch: 16,
        d_latent: 16,
        d_cond: 16,
        heads: 2,
        dropout: 0.0,
        max_patches: 4096,
        n_dataset_ids: 3,
    };
    let mut rng = seeded_rng(11);
    let model = FitModel::new(cfg, &mut rng).unwrap();
    let cond = cond_for(&model, "steady rain", 7);
    let ns = [128usize, 256, 512, 1024, 2048, 4096];
    let report = flop_linearity(&model, &cond, &ns).unwrap();
    assert!(report.r_squared > 0.999, "R^2 = {}", report.r_squared);
    assert!(report.slope > 0.0);
}

#[test]
fn global_attention_cost_is_flat_in_patch_count() {
    // Difference between global_layers = 1 and 0 is the cost of the global
    // stack alone; it must not depend on the patch count.
    let base = FitConfig {
        in_channels: 4,
        patch_size: 1,
        group_size: 32,
        n_latent_tokens: 64,
        n_blocks: 1,
        local_layers: 1,
        global_layers: 0,
        d_patch: 16,
        d_latent: 16,
        d_cond: 16,
        heads: 2,
        dropout: 0.0,
        max_patches: 4096,
        n_dataset_ids: 3,
    };
    let with_global = FitConfig { global_layers: 1, ..base.clone() };
    let mut rng = seeded_rng(12);
    let m0 = FitModel::new(base, &mut rng).unwrap();
    let m1 = FitModel::new(with_global, &mut rng).unwrap();
    let cond0 = cond_for(&m0, "hum", 2);
    let cond1 = cond_for(&m1, "hum", 2);
    let mut diffs = Vec::new();
    for n in [128usize, 1024, 4096] {
        let f0 = m0.forward_flops(n, &cond0).unwrap();
        let f1 = m1.forward_flops(n, &cond1).unwrap();
        diffs.push(f1 - f0);
    }
    assert_eq!(diffs[0], diffs[1]);
    assert_eq!(diffs[1], diffs[2]);
}

#[test]
fn parameter_count_ignores_group_size_and_patch_count() {
    let mk = |group_size: usize| {
        let mut rng = seeded_rng(13);
        FitModel::new(FitConfig { group_size, ..small_config() }, &mut rng).unwrap()
    };
    let a = mk(2);
    let b = mk(8);
    assert_eq!(a.n_params(), b.n_params());
    // Patch count is a runtime property; the same model serves any length
    // up to max_patches with the same parameter vector.
    let mut rng = seeded_rng(14);
    let cond = cond_for(&a, "test", 1);
    let z1 = Tensor::randn(&[6, 8], &mut rng);
    let z2 = Tensor::randn(&[6, 24], &mut rng);
    assert!(a.predict(&z1, &cond).is_ok());
    assert!(a.predict(&z2, &cond).is_ok());
}

// ── Gradients ───────────────────────────────────────────────────────

#[test]
fn miniature_fit_gradients_match_finite_differences() {
    use aural_core::fdcheck::max_grad_error;

    let cfg = FitConfig {
        in_channels: 3,
        patch_size: 1,
        group_size: 4,
        n_latent_tokens: 4,
        n_blocks: 2,
        local_layers: 1,
        global_layers: 1,
        d_patch: 8,
        d_latent: 8,
        d_cond: 8,
        heads: 2,
        dropout: 0.0,
        max_patches: 8,
        n_dataset_ids: 2,
    };
    let mut rng = seeded_rng(15);
    let mut model = FitModel::new(cfg, &mut rng).unwrap();
    // The output head starts at zero; give it real values so its gradient
    // path is exercised away from the trivial point.
    *model.params.get_mut("out.w") = Tensor::randn(&[8, 3], &mut rng).map(|v| v * 0.05);
    *model.params.get_mut("out.b") = Tensor::randn(&[3], &mut rng).map(|v| v * 0.05);

    let z = Tensor::randn(&[3, 6], &mut rng);
    let eps_target = Tensor::randn(&[3, 6], &mut rng);
    let cond = build_conditioning("quiet hum", 4, "audiocaps", &DatasetRegistry::new(&["audiocaps".into()]).unwrap(), 8).unwrap();

    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();

    let err = max_grad_error(&values, &|tape, ids| {
        let bound = Bound::from_names_ids(&names, ids);
        let zid = tape.constant(z.clone());
        let eps_id = tape.constant(eps_target.clone());
        let mut fwd_rng = seeded_rng(0);
        let out = model
            .forward(tape, &bound, zid, &cond, &ForwardOptions::default(), &mut fwd_rng)
            .unwrap();
        let diff = tape.sub(out, eps_id).unwrap();
        let sq = tape.square(diff);
        tape.mean_all(sq)
    });
    assert!(err < 1e-4, "full FIT rel err {err}");
}
