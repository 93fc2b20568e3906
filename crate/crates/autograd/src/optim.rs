//! Adam and AdamW.

use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightDecayMode {
    /// Classic Adam: decay is added to the gradient as an L2 term.
    Coupled,
    /// AdamW: decay is applied to the weights directly.
    Decoupled,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub mode: WeightDecayMode,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    #[allow(clippy::self_named_constructors)]
    pub fn adam(weight_decay: f64) -> Self {
        Self::with_mode(weight_decay, WeightDecayMode::Coupled)
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self::with_mode(weight_decay, WeightDecayMode::Decoupled)
    }

    fn with_mode(weight_decay: f64, mode: WeightDecayMode) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            mode,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter of `store` that has a gradient.
    /// Moment buffers are indexed by parameter position, so the store's
    /// layout must not change between steps.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in 0..store.len() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.param(store, id) else {
                continue;
            };
            let g = g.clone();
            let w = store.value_mut(id);
            let m = self.m[id].get_or_insert_with(|| Tensor::zeros(w.shape()));
            let v = self.v[id].get_or_insert_with(|| Tensor::zeros(w.shape()));
            let wd = self.weight_decay;
            for (((wi, &gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = match self.mode {
                    WeightDecayMode::Coupled => gi + wd * *wi,
                    WeightDecayMode::Decoupled => gi,
                };
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if self.mode == WeightDecayMode::Decoupled {
                    *wi -= lr * wd * *wi;
                }
                *wi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
