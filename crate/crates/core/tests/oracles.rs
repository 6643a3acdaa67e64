//! Independent-oracle and property checks for the numeric kernels.

use aural_core::seeded_rng;
use aural_core::tape::GradTape;
use aural_core::tensor::Tensor;
use proptest::prelude::*;

/// Naive sliding-window convolution, written independently of the kernel.
/// Summation order (channel-major, then kernel tap) mirrors the natural
/// definition so f64 results are reproducible bit-for-bit.
fn conv1d_oracle(
    x: &[f64],
    c_in: usize,
    l: usize,
    w: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let l_out = (l + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; c_out * l_out];
    for oc in 0..c_out {
        for p in 0..l_out {
            let mut acc = 0.0;
            for ic in 0..c_in {
                for kk in 0..k {
                    let pos = (p * stride + kk) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < l {
                        acc += x[ic * l + pos as usize] * w[(oc * c_in + ic) * k + kk];
                    }
                }
            }
            out[oc * l_out + p] = acc;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv1d_equals_naive_oracle_bit_for_bit(
        seed in 0u64..1000,
        c_in in 1usize..4,
        c_out in 1usize..4,
        k in 1usize..5,
        l in 4usize..20,
        stride in 1usize..3,
        padding in 0usize..3,
    ) {
        prop_assume!(l + 2 * padding >= k);
        let mut rng = seeded_rng(seed);
        let x = Tensor::randn(&[c_in, l], &mut rng);
        let w = Tensor::randn(&[c_out, c_in, k], &mut rng);
        let expected = conv1d_oracle(x.data(), c_in, l, w.data(), c_out, k, stride, padding);

        let mut tape = GradTape::new();
        let xid = tape.constant(x);
        let wid = tape.constant(w);
        let y = tape.conv1d(xid, wid, stride, padding).unwrap();
        let got = tape.value(y).data();
        prop_assert_eq!(got.len(), expected.len());
        for (g, e) in got.iter().zip(&expected) {
            prop_assert_eq!(g.to_bits(), e.to_bits());
        }
    }

    #[test]
    fn softmax_rows_are_probabilities(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..9) {
        let mut rng = seeded_rng(seed);
        let x = Tensor::randn(&[rows, cols], &mut rng).map(|v| v * 10.0);
        let mut tape = GradTape::new();
        let xid = tape.constant(x);
        let y = tape.softmax(xid, 1).unwrap();
        let v = tape.value(y);
        for r in 0..rows {
            let sum: f64 = (0..cols).map(|c| v.get(&[r, c])).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for c in 0..cols {
                let p = v.get(&[r, c]);
                prop_assert!(p > 0.0 && p <= 1.0);
            }
        }
    }

    #[test]
    fn finite_inputs_yield_finite_outputs(seed in 0u64..1000) {
        let mut rng = seeded_rng(seed);
        let x = Tensor::randn(&[3, 7], &mut rng);
        let mut tape = GradTape::new();
        let xid = tape.leaf(x.with_grad());
        let g = tape.gelu(xid);
        let s = tape.silu(g);
        let t = tape.tanh(s);
        let sm = tape.softmax(t, 1).unwrap();
        let loss = tape.mean_all(sm);
        tape.backward(loss).unwrap();
        prop_assert!(tape.value(sm).all_finite());
        prop_assert!(tape.grad(xid).unwrap().all_finite());
    }
}
