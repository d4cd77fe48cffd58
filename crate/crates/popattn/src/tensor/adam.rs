//! Adam with bias correction. The optimizer reads accumulated gradients and
//! never mutates them; the training loop decides when to zero.

use super::params::ParamSet;
use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState<E: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Scalar> AdamState<E> {
    /// Fresh moment buffers for every parameter, beta1 = 0.9, beta2 = 0.999,
    /// eps = 1e-8.
    pub fn new(params: &ParamSet<E>) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| vec![E::ZERO; p.value.numel()])
            .collect();
        let v = params
            .iter()
            .map(|(_, p)| vec![E::ZERO; p.value.numel()])
            .collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter. Gradients that were never touched
    /// stay zero, and zero gradient on fresh state leaves the parameter
    /// unchanged.
    pub fn step(&mut self, params: &mut ParamSet<E>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "adam state tracks {} parameters, set has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.beta2);
        let corr1 = E::from_f64(1.0 - self.beta1.powi(t));
        let corr2 = E::from_f64(1.0 - self.beta2.powi(t));
        let eps = E::from_f64(self.eps);
        let lr = E::from_f64(lr);

        for (slot, (_, p)) in params.iter_mut().enumerate() {
            let n = p.value.numel();
            if self.m[slot].len() != n {
                return Err(Error::invalid(format!(
                    "adam moment size {} does not match parameter {:?} ({n})",
                    self.m[slot].len(),
                    p.name()
                )));
            }
            let zeros;
            let grad: &[E] = match p.value.grad() {
                Some(g) => g,
                None => {
                    zeros = vec![E::ZERO; n];
                    &zeros
                }
            };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            // Split borrows: grad points into p.value internals, so copy the
            // update into a scratch then apply.
            let mut update = vec![E::ZERO; n];
            for i in 0..n {
                let gi = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                update[i] = lr * m_hat / (v_hat.sqrt() + eps);
            }
            let data = p.value.data_mut();
            for i in 0..n {
                data[i] -= update[i];
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<E: Scalar>(params: &mut ParamSet<E>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, p) in params.iter() {
        if let Some(g) = p.value.grad() {
            for gi in g {
                let x = gi.to_f64();
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64(max_norm / norm);
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.value.grad_mut() {
                for gi in g.iter_mut() {
                    *gi *= scale;
                }
            }
        }
    }
    norm
}
