//! Optimisation schedules and training pipelines.
//!
//! Every pipeline draws its randomness from named streams of one seed, runs
//! single-threaded in `f64`, and therefore reproduces its loss curve bit for
//! bit. Each optimisation step clips the global gradient norm to 1.0 and
//! aborts on a non-finite loss before touching the parameters.

mod distill;
mod kd;
mod record;
mod schedule;
mod ssl;
mod supervised;

use std::time::Instant;

use kd_autograd::{Adam, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::rng;

pub use distill::DistillationConfig;
pub use kd::{
    pretrain_ta_kd, pretrain_ta_kd_cached, pretrain_ts_kd, pretrain_ts_kd_cached, TeacherCache,
};
pub use record::{smooth, RunRecord};
pub use schedule::{Decay, OptimizerKind, Schedule};
pub use ssl::{mae_mask, pretrain_mae, pretrain_moco, two_views, MaeOptions, MocoOptions};
pub use supervised::{
    evaluate_student, evaluate_teacher, finetune_student, finetune_teacher_lora, lora_rank_sweep,
    pretrain_teacher_supervised, teacher_full_logits, RankSweep, RankSweepRow,
};

/// Gradient clipping threshold used by every pipeline.
pub const CLIP_NORM: f64 = 1.0;

/// Shared optimisation loop state.
pub(crate) struct Loop<'a> {
    sched: &'a Schedule,
    total: usize,
    iter: usize,
    optimizers: Vec<Adam>,
    started: Instant,
}

impl<'a> Loop<'a> {
    pub(crate) fn new(sched: &'a Schedule, samples: usize, stores: usize) -> Result<Self> {
        sched.validate()?;
        if samples == 0 {
            return Err(CoreError::Dataset("no training samples".into()));
        }
        Ok(Self {
            sched,
            total: sched.total_iters(samples),
            iter: 0,
            optimizers: (0..stores).map(|_| sched.optimizer()).collect(),
            started: Instant::now(),
        })
    }

    /// Shuffled sample order for `epoch`.
    pub(crate) fn order(n: usize, seed: u64, purpose: &str, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, &format!("{purpose}-epoch-{epoch}")));
        idx
    }

    /// Backpropagates `loss`, clips, and updates every store.
    pub(crate) fn step(
        &mut self,
        g: &Graph,
        loss: Var,
        stores: &mut [&mut ParamStore],
    ) -> Result<f64> {
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(CoreError::Numerical(format!(
                "loss became {value} at iteration {}; parameters kept at their last finite state",
                self.iter
            )));
        }
        let mut grads = g.backward(loss);
        grads.clip_global_norm(CLIP_NORM);
        if !grads.is_finite() {
            return Err(CoreError::Numerical(format!(
                "non-finite gradient at iteration {}",
                self.iter
            )));
        }
        let lr = self.sched.lr_at(self.iter, self.total);
        for (opt, store) in self.optimizers.iter_mut().zip(stores.iter_mut()) {
            opt.step(store, &grads, lr);
        }
        self.iter += 1;
        Ok(value)
    }

    pub(crate) fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }
}

/// Mean of per-sample loss nodes.
pub(crate) fn mean_of(g: &Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Copies of every frozen parameter, for post-run audits.
pub fn frozen_snapshot(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .filter(|p| !p.trainable)
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Fails unless every snapshotted parameter is bit-identical in `store`.
pub fn audit_frozen(store: &ParamStore, snapshot: &[(String, Tensor)]) -> Result<()> {
    for (name, before) in snapshot {
        let now = store.get(name).ok_or_else(|| {
            CoreError::Integrity(format!("frozen parameter `{name}` disappeared"))
        })?;
        let same = now.shape() == before.shape()
            && now
                .data()
                .iter()
                .zip(before.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(CoreError::Integrity(format!(
                "frozen parameter `{name}` changed"
            )));
        }
    }
    Ok(())
}
