//! Central finite-difference checks for hand-written gradients.

use super::{Matrix, Module};

pub const FD_STEP: f64 = 1e-6;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Picks at most `limit` evenly spread indices out of `len`.
fn probe_indices(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        (0..limit).map(|i| i * len / limit).collect()
    }
}

/// Worst relative error between `grads` and central differences of `loss`
/// over every trainable entry of `model`.
pub fn check_param_grads<M, F>(model: &M, grads: &M, loss: F) -> f64
where
    M: Module + Clone,
    F: Fn(&M) -> f64,
{
    check_param_grads_sampled(model, grads, loss, usize::MAX)
}

/// As [`check_param_grads`] but probing at most `per_tensor` entries of each
/// tensor.
pub fn check_param_grads_sampled<M, F>(model: &M, grads: &M, loss: F, per_tensor: usize) -> f64
where
    M: Module + Clone,
    F: Fn(&M) -> f64,
{
    let analytic: Vec<Vec<f64>> = grads.params().iter().map(|m| m.data().to_vec()).collect();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (t, tensor_grads) in analytic.iter().enumerate() {
        for idx in probe_indices(tensor_grads.len(), per_tensor) {
            let original = probe.params()[t].data()[idx];
            probe.params_mut()[t].data_mut()[idx] = original + FD_STEP;
            let up = loss(&probe);
            probe.params_mut()[t].data_mut()[idx] = original - FD_STEP;
            let down = loss(&probe);
            probe.params_mut()[t].data_mut()[idx] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(tensor_grads[idx], numeric));
        }
    }
    worst
}

pub fn check_input_grad<F>(x: &Matrix, grad: &Matrix, loss: F) -> f64
where
    F: Fn(&Matrix) -> f64,
{
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for idx in 0..x.data().len() {
        let original = x.data()[idx];
        probe.data_mut()[idx] = original + FD_STEP;
        let up = loss(&probe);
        probe.data_mut()[idx] = original - FD_STEP;
        let down = loss(&probe);
        probe.data_mut()[idx] = original;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_error(grad.data()[idx], numeric));
    }
    worst
}
