//! Adam with decoupled weight decay.

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam over a fixed group of parameters. Moment buffers are created lazily
/// and keyed by position in the group.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    group: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, group: Vec<ParamId>) -> Self {
        let n = group.len();
        Adam {
            config,
            group,
            m: vec![Vec::new(); n],
            v: vec![Vec::new(); n],
            t: 0,
        }
    }

    pub fn group(&self) -> &[ParamId] {
        &self.group
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update from the accumulated gradients. Frozen parameters are left
    /// bitwise untouched. Gradients are not cleared.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (slot, &id) in self.group.iter().enumerate() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            if self.m[slot].len() != n {
                self.m[slot] = vec![0.0; n];
                self.v[slot] = vec![0.0; n];
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * value[i]);
            }
        }
    }
}
