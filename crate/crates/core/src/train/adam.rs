//! Adam with per-tensor moment slots and one shared step counter.
//!
//! The training loop walks its enabled tensors in a fixed order every step,
//! so slot indices are stable across the whole phase.

use crate::train::hyper::Hyperparams;

#[derive(Debug, Clone, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(hp: &Hyperparams) -> Self {
        Adam {
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.adam_eps,
            t: 0,
            slots: Vec::new(),
        }
    }

    /// Advances the shared step counter; call once per optimizer step,
    /// before updating any tensor.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to a tensor identified by its slot index.
    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, Slot::default);
        }
        let state = &mut self.slots[slot];
        if state.m.is_empty() {
            state.m = vec![0.0; params.len()];
            state.v = vec![0.0; params.len()];
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
