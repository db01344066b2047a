use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamGroup, ParamStore};
use crate::tensor::Real;

/// Adam with the usual moment constants and bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState<F>,
}

/// Moment estimates and step counter; everything needed to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = params.zeros_like().data;
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn state(&self) -> &AdamState<F> {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamState<F>) {
        self.state = state;
    }

    /// One update with learning rate `lr`. Parameters in `frozen` are left
    /// untouched, bit for bit.
    pub fn step(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &Grads<F>,
        lr: f64,
        frozen: Option<ParamGroup>,
    ) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - self.beta1), F::lit(1.0 - self.beta2));
        let step_size = F::lit(lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        let eps = F::lit(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            if frozen == Some(p.group) {
                continue;
            }
            let g = &grads.data[i];
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                p.data[j] -= step_size * m[j] / denom;
            }
        }
    }
}
