//! AdamW with decoupled weight decay.

use crate::nn::{Grads, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f32, beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Updates every parameter whose group is not frozen.
    ///
    /// Decay applies to matrices only; biases, norms and vectors are exempt.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Grads<f32>) {
        if self.m.len() != store.len() {
            self.m = store.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let frozen = store.frozen_flags().clone();
        for (idx, p) in store.params_mut().iter_mut().enumerate() {
            if frozen.get(&p.group).copied().unwrap_or(false) {
                continue;
            }
            let decay = if p.shape.len() >= 2 { self.weight_decay } else { 0.0 };
            let g = &grads.buffers()[idx];
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for j in 0..p.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] -= self.lr * (mh / (vh.sqrt() + self.eps) + decay * p.data[j]);
            }
        }
    }
}
