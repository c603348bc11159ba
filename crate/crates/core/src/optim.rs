//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub clip_norm: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Adam {
    pub fn new(lr: f32, clip_norm: f32) -> Self {
        Self {
            lr,
            clip_norm,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    ///
    /// The global gradient norm is scaled down to `clip_norm` before the
    /// moment update. A non-finite gradient aborts the step (gradients are
    /// left in place) and names the offending parameter.
    pub fn step(&self, params: &mut ParamSet) -> Result<f64> {
        for id in params.ids() {
            if !params.grad(id).all_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        let norm = params.grad_norm();
        let scale = if norm > self.clip_norm as f64 && norm > 0.0 {
            (self.clip_norm as f64 / norm) as f32
        } else {
            1.0
        };
        params.step += 1;
        let t = params.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in params.ids() {
            let (value, grad, m, v) = params.moments_mut(id);
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in it {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        params.zero_grads();
        Ok(norm)
    }
}

/// Applies global-norm clipping in place and returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f32) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm as f64 && norm > 0.0 {
        let s = (max_norm as f64 / norm) as f32;
        for id in params.ids().collect::<Vec<_>>() {
            params.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
