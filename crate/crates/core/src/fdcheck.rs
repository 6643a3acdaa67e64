//! Central finite-difference gradient checking.
//!
//! Lives in the library (not test code) so downstream crates can reuse the
//! same harness; it never touches the analytic backward path it verifies.

use crate::tape::{GradTape, ValueId};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

/// Builds a scalar loss from the given leaves on a fresh tape. Must be a
/// pure function of the leaf values.
pub type LossFn<'a> = &'a dyn Fn(&mut GradTape, &[ValueId]) -> ValueId;

/// Max over elements of |a - n| / max(|a|, |n|, 1).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Analytic gradients of `loss` with respect to each input.
pub fn analytic_grads(inputs: &[Tensor], loss: LossFn) -> (f64, Vec<Tensor>) {
    let mut tape = GradTape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = loss(&mut tape, &ids);
    let value = tape.value(out).item();
    tape.backward(out).expect("scalar loss");
    let grads = ids
        .iter()
        .map(|&id| tape.grad(id).unwrap_or_else(|| Tensor::zeros(tape.value(id).shape())))
        .collect();
    (value, grads)
}

/// Central finite differences, h = FD_STEP, one fresh tape per evaluation.
pub fn numeric_grads(inputs: &[Tensor], loss: LossFn) -> Vec<Tensor> {
    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = GradTape::new();
        let ids: Vec<ValueId> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = loss(&mut tape, &ids);
        tape.value(out).item()
    };
    let mut grads = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[which].shape());
        for i in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= FD_STEP;
            g.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative error across all inputs of `loss` at `inputs`.
pub fn max_grad_error(inputs: &[Tensor], loss: LossFn) -> f64 {
    let (_, analytic) = analytic_grads(inputs, loss);
    let numeric = numeric_grads(inputs, loss);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .fold(0.0, f64::max)
}
