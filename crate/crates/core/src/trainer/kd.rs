use kd_autograd::{Graph, Tensor};

use super::{mean_of, DistillationConfig, Loop, RunRecord, Schedule};
use crate::data::{Image, TransferSet};
use crate::error::{CoreError, Result};
use crate::losses::{
    combine_kd, decoder_kd_loss, encoder_kd_loss, HiddenProjection, KDLossTerms, MaskMode,
};
use crate::models::{Student, Teacher};

/// Teacher outputs precomputed for every transfer image. The teacher never
/// trains during distillation, so one pass suffices.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    /// `N x d_T` hidden states per image.
    pub tokens: Vec<Tensor>,
    /// `(S/4)^2 x (C+1)` raw logits per image.
    pub raw_logits: Vec<Tensor>,
    pub grid: usize,
    pub low_size: usize,
    pub classes: usize,
    pub hidden_dim: usize,
    pub fine_tuned: bool,
}

impl TeacherCache {
    pub fn build(teacher: &Teacher, images: &[Image]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(images.len());
        let mut raw_logits = Vec::with_capacity(images.len());
        for img in images {
            let g = Graph::new();
            let v = teacher.forward(&g, img)?;
            tokens.push((*g.value(v.tokens)).clone());
            raw_logits.push((*g.value(v.raw_logits)).clone());
        }
        Ok(Self {
            tokens,
            raw_logits,
            grid: teacher.config.encoder.grid(),
            low_size: teacher.config.low_size(),
            classes: teacher.config.classes,
            hidden_dim: teacher.config.encoder.embed_dim,
            fine_tuned: teacher.fine_tuned,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn mean_terms(terms: &[KDLossTerms]) -> KDLossTerms {
    let n = terms.len() as f64;
    let mut out = terms[0];
    out.encoder_loss = terms.iter().map(|t| t.encoder_loss).sum::<f64>() / n;
    out.decoder_loss = terms.iter().map(|t| t.decoder_loss).sum::<f64>() / n;
    out.weighted_total = terms.iter().map(|t| t.weighted_total).sum::<f64>() / n;
    out
}

/// Shared distillation loop. With `freeze_head` the student's head is held
/// fixed (it receives no gradient either way when the decoder term is off).
fn distill(
    student: &mut Student,
    transfer: &TransferSet,
    cache: &TeacherCache,
    dcfg: &DistillationConfig,
    sched: &Schedule,
    seed: u64,
    record: &mut RunRecord,
) -> Result<()> {
    dcfg.validate()?;
    if transfer.len() != cache.len() {
        return Err(CoreError::Config(format!(
            "teacher cache covers {} images, transfer set has {}",
            cache.len(),
            transfer.len()
        )));
    }
    let grid = student.config.encoder.grid();
    if grid != cache.grid {
        return Err(CoreError::Shape(format!(
            "student token grid {grid}x{grid} differs from teacher grid {0}x{0}",
            cache.grid
        )));
    }
    let w_hidden = dcfg.hidden_weight();
    let w_decoder = dcfg.decoder_weight();
    let use_decoder = w_decoder > 0.0;
    if use_decoder && student.config.classes != cache.classes {
        return Err(CoreError::Shape(format!(
            "student predicts {} classes, teacher {}",
            student.config.classes, cache.classes
        )));
    }
    let mut proj = if w_hidden > 0.0 {
        HiddenProjection::new(student.config.encoder.embed_dim, cache.hidden_dim, seed)?
    } else {
        None
    };
    let s = student.config.encoder.image_size;
    let low = cache.low_size;
    let c = cache.classes;
    let mut lp = Loop::new(sched, transfer.len(), 2)?;
    for epoch in 0..sched.epochs {
        for batch in Loop::order(transfer.len(), seed, "kd", epoch).chunks(sched.batch_size) {
            let g = Graph::new();
            let mut losses = Vec::with_capacity(batch.len());
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let tokens = student.encode(&g, &transfer.images[i], Default::default())?;
                let enc = if w_hidden > 0.0 {
                    let ht = g.constant(cache.tokens[i].clone());
                    Some(encoder_kd_loss(&g, tokens, ht, proj.as_ref())?)
                } else {
                    None
                };
                let dec = if use_decoder {
                    let ys = student.head(&g, tokens)?;
                    let raw = g.constant(cache.raw_logits[i].clone());
                    let yt = if dcfg.mask_mode == MaskMode::DropLastChannel {
                        raw
                    } else {
                        g.slice_cols(raw, 0, c)
                    };
                    let kind = dcfg.decoder_loss.expect("decoder weight implies a kind");
                    Some(decoder_kd_loss(
                        &g,
                        ys,
                        (s, s),
                        yt,
                        (low, low),
                        kind,
                        dcfg.mask_mode,
                    )?)
                } else {
                    None
                };
                let (total, t) = combine_kd(&g, enc, dec, w_hidden, w_decoder, dcfg.decoder_loss);
                losses.push(total);
                terms.push(t);
            }
            let loss = mean_of(&g, &losses);
            let value = match proj.as_mut() {
                Some(p) => lp.step(&g, loss, &mut [&mut student.params, &mut p.params])?,
                None => lp.step(&g, loss, &mut [&mut student.params])?,
            };
            record.loss_curve.push(value);
            record.kd_terms.push(mean_terms(&terms));
        }
    }
    record.wall_clock_secs = lp.elapsed();
    Ok(())
}

fn kd_record(
    pipeline: &str,
    dcfg: &DistillationConfig,
    sched: &Schedule,
    seed: u64,
    transfer: &TransferSet,
) -> RunRecord {
    let mut r = RunRecord::new(
        pipeline,
        serde_json::json!({
            "distillation": dcfg,
            "schedule": sched,
            "transfer_size": transfer.len(),
            "transfer_provenance": transfer.provenance,
        }),
        seed,
    );
    r.notes.insert("distillation".into(), dcfg.name.clone());
    r
}

/// Encoder-level distillation from the unadapted teacher. The student head
/// is left exactly as it was.
pub fn pretrain_ta_kd(
    student: &mut Student,
    teacher: &Teacher,
    transfer: &TransferSet,
    sched: &Schedule,
    seed: u64,
) -> Result<RunRecord> {
    let cache = TeacherCache::build(teacher, &transfer.images)?;
    pretrain_ta_kd_cached(student, &cache, transfer, sched, seed)
}

pub fn pretrain_ta_kd_cached(
    student: &mut Student,
    cache: &TeacherCache,
    transfer: &TransferSet,
    sched: &Schedule,
    seed: u64,
) -> Result<RunRecord> {
    if cache.fine_tuned {
        return Err(CoreError::Config(
            "task-agnostic distillation expects the unadapted teacher".into(),
        ));
    }
    let dcfg = DistillationConfig::ta_kd();
    let mut record = kd_record("ta-kd", &dcfg, sched, seed, transfer);
    let flags: Vec<(usize, bool)> = student
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.trainable))
        .collect();
    student.params.set_trainable_prefix("head.", false);
    let result = distill(student, transfer, cache, &dcfg, sched, seed, &mut record);
    for (i, t) in flags {
        student.params.set_trainable(i, t);
    }
    result?;
    Ok(record)
}

/// Dual-level distillation from the task-adapted teacher: weighted hidden
/// state MSE plus logit distillation as configured.
pub fn pretrain_ts_kd(
    student: &mut Student,
    teacher: &Teacher,
    transfer: &TransferSet,
    dcfg: &DistillationConfig,
    sched: &Schedule,
    seed: u64,
) -> Result<RunRecord> {
    if !teacher.fine_tuned {
        return Err(CoreError::Config(
            "task-specific distillation needs a teacher fine-tuned on the task".into(),
        ));
    }
    let cache = TeacherCache::build(teacher, &transfer.images)?;
    pretrain_ts_kd_cached(student, &cache, transfer, dcfg, sched, seed)
}

pub fn pretrain_ts_kd_cached(
    student: &mut Student,
    cache: &TeacherCache,
    transfer: &TransferSet,
    dcfg: &DistillationConfig,
    sched: &Schedule,
    seed: u64,
) -> Result<RunRecord> {
    if !cache.fine_tuned {
        return Err(CoreError::Config(
            "task-specific distillation needs a teacher fine-tuned on the task".into(),
        ));
    }
    let mut record = kd_record("ts-kd", dcfg, sched, seed, transfer);
    distill(student, transfer, cache, dcfg, sched, seed, &mut record)?;
    Ok(record)
}
