use kd_autograd::Adam;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Weight decay added to the gradient.
    Adam,
    /// Decoupled weight decay.
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    Cosine,
    None,
}

/// Optimiser and learning-rate schedule for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub decay: Decay,
}

impl Schedule {
    /// Teacher adapter fine-tuning: AdamW, lr 0.005, 250 warmup iterations,
    /// 160 epochs.
    pub fn teacher_lora() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            base_lr: 0.005,
            weight_decay: 0.01,
            warmup_iters: 250,
            epochs: 160,
            batch_size: 8,
            decay: Decay::Cosine,
        }
    }

    /// Masked-autoencoder pretraining: batch 64, AdamW, lr 1.5e-4, wd 0.05,
    /// 1600 epochs.
    pub fn mae() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            warmup_iters: 0,
            epochs: 1600,
            batch_size: 64,
            decay: Decay::Cosine,
        }
    }

    /// Contrastive pretraining: batch 32, AdamW, lr 1.5e-4, wd 0.1, 1600
    /// epochs.
    pub fn moco() -> Self {
        Self {
            batch_size: 32,
            weight_decay: 0.1,
            ..Self::mae()
        }
    }

    /// Distillation pretraining: batch 48, Adam, lr 1.5e-4, wd 0.05, 1600
    /// epochs.
    pub fn kd() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            batch_size: 48,
            ..Self::mae()
        }
    }

    /// Student fine-tuning: batch 6, AdamW, lr 1e-4, 160 epochs.
    pub fn finetune() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            base_lr: 1e-4,
            weight_decay: 0.05,
            warmup_iters: 0,
            epochs: 160,
            batch_size: 6,
            decay: Decay::Cosine,
        }
    }

    /// Divides the epoch count by 20 (at least one epoch).
    pub fn desk(mut self) -> Self {
        self.epochs = (self.epochs / 20).max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr.is_nan()
            || self.base_lr <= 0.0
            || self.weight_decay < 0.0
            || self.batch_size == 0
        {
            return Err(CoreError::Config(format!(
                "schedule needs lr > 0, weight decay ≥ 0 and batch size ≥ 1 (got {}, {}, {})",
                self.base_lr, self.weight_decay, self.batch_size
            )));
        }
        Ok(())
    }

    pub fn iters_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn total_iters(&self, samples: usize) -> usize {
        self.epochs * self.iters_per_epoch(samples)
    }

    /// Learning rate at iteration `k` of `total`: linear ramp
    /// `base (k+1) / warmup` during warmup, then cosine from `base` to 0.
    pub fn lr_at(&self, k: usize, total: usize) -> f64 {
        if k < self.warmup_iters {
            return self.base_lr * (k + 1) as f64 / self.warmup_iters as f64;
        }
        match self.decay {
            Decay::None => self.base_lr,
            Decay::Cosine => {
                let span = total.saturating_sub(self.warmup_iters).max(1) as f64;
                let progress = ((k - self.warmup_iters) as f64 / span).min(1.0);
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn optimizer(&self) -> Adam {
        match self.optimizer {
            OptimizerKind::Adam => Adam::adam(self.weight_decay),
            OptimizerKind::Adamw => Adam::adamw(self.weight_decay),
        }
    }
}
