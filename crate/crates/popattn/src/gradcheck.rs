//! Central-difference oracles for the test suites. These re-evaluate the
//! forward pass at perturbed points (always in f64) and never touch the
//! tape's adjoint code, so they stay an independent check on it.

use crate::tensor::ParamSet;

/// Central difference (f(x+h) - f(x-h)) / 2h per coordinate, h = 1e-3.
pub const FD_STEP: f64 = 1e-3;

/// Relative error with a floored denominator. Near-zero gradients are
/// dominated by truncation noise of the difference quotient itself, so below
/// the floor the check degrades into an absolute tolerance instead of
/// rejecting harmless noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-2);
    (analytic - numeric).abs() / denom
}

/// Worst relative error over paired gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point);
        point[i] = orig - h;
        let down = f(&point);
        point[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Central-difference gradients of a scalar loss with respect to every
/// element of every parameter. The loss closure must re-run the forward pass
/// from the given parameter values.
pub fn fd_param_grads(
    params: &mut ParamSet<f64>,
    mut loss: impl FnMut(&ParamSet<f64>) -> f64,
    h: f64,
) -> Vec<Vec<f64>> {
    let count = params.len();
    let mut out = Vec::with_capacity(count);
    for slot in 0..count {
        let numel = {
            let (_, p) = params.iter().nth(slot).expect("slot in range");
            p.value.numel()
        };
        let mut grad = vec![0.0; numel];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = nth_value(params, slot, i);
            set_nth_value(params, slot, i, orig + h);
            let up = loss(params);
            set_nth_value(params, slot, i, orig - h);
            let down = loss(params);
            set_nth_value(params, slot, i, orig);
            *g = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

fn nth_value(params: &ParamSet<f64>, slot: usize, i: usize) -> f64 {
    let (_, p) = params.iter().nth(slot).expect("slot in range");
    p.value.data()[i]
}

fn set_nth_value(params: &mut ParamSet<f64>, slot: usize, i: usize, v: f64) {
    let (_, p) = params.iter_mut().nth(slot).expect("slot in range");
    p.value.data_mut()[i] = v;
}

/// Analytic gradients currently accumulated in a parameter set, in f64.
pub fn collected_grads<E: crate::tensor::Scalar>(params: &ParamSet<E>) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|(_, p)| match p.value.grad() {
            Some(g) => g.iter().map(|v| v.to_f64()).collect(),
            None => vec![0.0; p.value.numel()],
        })
        .collect()
}
