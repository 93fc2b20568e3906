use kd_autograd::{Graph, Var};
use serde::{Deserialize, Serialize};

use super::{audit_frozen, frozen_snapshot, mean_of, Loop, RunRecord, Schedule};
use crate::data::{LabeledDataset, Mask};
use crate::error::{CoreError, Result};
use crate::lora::{self, LoraConfig};
use crate::losses::{ce_dice_loss, SupervisedLossWeights};
use crate::metrics::{evaluate_masks, Hd95Mode, MetricsReport};
use crate::models::resample::{resize_var, Resample};
use crate::models::{Student, Teacher};

/// Teacher class logits bilinearly upsampled to the input resolution.
pub fn teacher_full_logits(g: &Graph, teacher: &Teacher, raw: Var) -> Var {
    let low = teacher.config.low_size();
    let s = teacher.config.encoder.image_size;
    let cls = teacher.class_logits(g, raw);
    resize_var(g, cls, (low, low), (s, s), Resample::Bilinear)
}

fn check_classes(model: usize, ds: &LabeledDataset) -> Result<()> {
    if model != ds.class_count() {
        return Err(CoreError::Config(format!(
            "model predicts {model} classes, dataset has {}",
            ds.class_count()
        )));
    }
    Ok(())
}

fn teacher_supervised_loop(
    teacher: &mut Teacher,
    ds: &LabeledDataset,
    sched: &Schedule,
    seed: u64,
    record: &mut RunRecord,
) -> Result<()> {
    check_classes(teacher.config.classes, ds)?;
    let mut lp = Loop::new(sched, ds.len(), 1)?;
    let w = SupervisedLossWeights::default();
    for epoch in 0..sched.epochs {
        for batch in Loop::order(ds.len(), seed, &record.pipeline, epoch).chunks(sched.batch_size) {
            let g = Graph::new();
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &ds.samples()[i];
                let v = teacher.forward(&g, &s.image)?;
                let logits = teacher_full_logits(&g, teacher, v.raw_logits);
                terms.push(ce_dice_loss(&g, logits, &s.mask, w)?);
            }
            let loss = mean_of(&g, &terms);
            record
                .loss_curve
                .push(lp.step(&g, loss, &mut [&mut teacher.params])?);
        }
    }
    record.wall_clock_secs = lp.elapsed();
    Ok(())
}

/// Full-parameter supervised training of a teacher (used to build the
/// broad-data starting point that adapters later specialise).
pub fn pretrain_teacher_supervised(
    teacher: &mut Teacher,
    ds: &LabeledDataset,
    sched: &Schedule,
    seed: u64,
) -> Result<RunRecord> {
    let mut record = RunRecord::new(
        "teacher-supervised",
        serde_json::json!({ "schedule": sched }),
        seed,
    );
    teacher.params.set_all_trainable(true);
    teacher_supervised_loop(teacher, ds, sched, seed, &mut record)?;
    Ok(record)
}

/// Adapts a teacher to `labeled` through low-rank adapters on its attention
/// projections, training the adapters and the decoder output layer with
/// 0.2 CE + 0.8 Dice on upsampled logits. Base weights stay bit-identical.
pub fn finetune_teacher_lora(
    teacher: &mut Teacher,
    labeled: &LabeledDataset,
    lora_cfg: &LoraConfig,
    sched: &Schedule,
    seed: u64,
) -> Result<RunRecord> {
    if labeled.is_empty() {
        return Err(CoreError::Dataset("no labelled samples".into()));
    }
    if !lora::has_adapters(&teacher.params) {
        lora::inject(&mut teacher.params, lora_cfg, seed)?;
    } else {
        lora::freeze_base(&mut teacher.params);
    }
    let snapshot = frozen_snapshot(&teacher.params);
    let mut record = RunRecord::new(
        "teacher-lora",
        serde_json::json!({ "lora": lora_cfg, "schedule": sched }),
        seed,
    );
    teacher_supervised_loop(teacher, labeled, sched, seed, &mut record)?;
    audit_frozen(&teacher.params, &snapshot)?;
    let report = lora::trainable_parameter_report(&teacher.params);
    record
        .notes
        .insert("adapter_params".into(), report.adapter_count.to_string());
    teacher.fine_tuned = true;
    Ok(record)
}

/// Supervised fine-tuning of the whole student with 0.2 CE + 0.8 Dice.
pub fn finetune_student(
    student: &mut Student,
    labeled: &LabeledDataset,
    sched: &Schedule,
    seed: u64,
) -> Result<RunRecord> {
    if labeled.is_empty() {
        return Err(CoreError::Dataset("no labelled samples".into()));
    }
    check_classes(student.config.classes, labeled)?;
    let mut record = RunRecord::new("finetune", serde_json::json!({ "schedule": sched }), seed);
    student.params.set_all_trainable(true);
    let mut lp = Loop::new(sched, labeled.len(), 1)?;
    let w = SupervisedLossWeights::default();
    for epoch in 0..sched.epochs {
        for batch in Loop::order(labeled.len(), seed, "finetune", epoch).chunks(sched.batch_size) {
            let g = Graph::new();
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &labeled.samples()[i];
                let v = student.forward(&g, &s.image)?;
                terms.push(ce_dice_loss(&g, v.logits, &s.mask, w)?);
            }
            let loss = mean_of(&g, &terms);
            record
                .loss_curve
                .push(lp.step(&g, loss, &mut [&mut student.params])?);
        }
    }
    record.wall_clock_secs = lp.elapsed();
    Ok(record)
}

fn class_names(ds: &LabeledDataset) -> Vec<String> {
    if ds.class_names.len() == ds.class_count() {
        ds.class_names.clone()
    } else {
        (0..ds.class_count()).map(|c| format!("class{c}")).collect()
    }
}

/// Arg-max predictions of the student on every sample, scored against the
/// reference masks.
pub fn evaluate_student(
    student: &Student,
    ds: &LabeledDataset,
    mode: Hd95Mode,
) -> Result<MetricsReport> {
    let preds = ds
        .samples()
        .iter()
        .map(|s| Ok(student.predict(&s.image)?.1.argmax()))
        .collect::<Result<Vec<Mask>>>()?;
    let refs: Vec<Mask> = ds.samples().iter().map(|s| s.mask.clone()).collect();
    evaluate_masks(&preds, &refs, &class_names(ds), (1.0, 1.0), mode)
}

/// Teacher predictions at input resolution, scored against the references.
pub fn evaluate_teacher(
    teacher: &Teacher,
    ds: &LabeledDataset,
    mode: Hd95Mode,
) -> Result<MetricsReport> {
    let s = teacher.config.encoder.image_size;
    let mut preds = Vec::with_capacity(ds.len());
    for sample in ds.samples() {
        let g = Graph::new();
        let v = teacher.forward(&g, &sample.image)?;
        let full = teacher_full_logits(&g, teacher, v.raw_logits);
        let logits = crate::models::SegLogits {
            logits: (*g.value(full)).clone(),
            height: s,
            width: s,
            resolution: crate::models::Resolution::Full,
        };
        preds.push(logits.argmax());
    }
    let refs: Vec<Mask> = ds.samples().iter().map(|s| s.mask.clone()).collect();
    evaluate_masks(&preds, &refs, &class_names(ds), (1.0, 1.0), mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSweepRow {
    pub rank: usize,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSweep {
    pub rows: Vec<RankSweepRow>,
    pub selected_rank: usize,
}

impl RankSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,mean_dice,mean_hd95,trainable_params\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{},{}\n",
                r.rank,
                r.mean_dice,
                r.mean_hd95.map_or_else(String::new, |v| format!("{v:.6}")),
                r.trainable_params
            ));
        }
        out
    }
}

/// Fine-tunes a copy of `base` per rank with a shared seed, scores each on
/// `validation`, and selects the best mean Dice (smallest rank on ties).
pub fn lora_rank_sweep(
    base: &Teacher,
    labeled: &LabeledDataset,
    validation: &LabeledDataset,
    ranks: &[usize],
    template: &LoraConfig,
    sched: &Schedule,
    seed: u64,
) -> Result<(RankSweep, Vec<Teacher>)> {
    if ranks.is_empty() {
        return Err(CoreError::Config("no ranks to sweep".into()));
    }
    let mut rows = Vec::with_capacity(ranks.len());
    let mut teachers = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        let mut t = base.clone();
        let cfg = LoraConfig {
            rank,
            ..template.clone()
        };
        finetune_teacher_lora(&mut t, labeled, &cfg, sched, seed)?;
        let report = evaluate_teacher(&t, validation, Hd95Mode::Pooled)?;
        rows.push(RankSweepRow {
            rank,
            mean_dice: report.mean_dice,
            mean_hd95: report.mean_hd95,
            trainable_params: t.params.count(true),
        });
        teachers.push(t);
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        let b = &rows[best];
        if r.mean_dice > b.mean_dice || (r.mean_dice == b.mean_dice && r.rank < b.rank) {
            best = i;
        }
    }
    Ok((
        RankSweep {
            selected_rank: rows[best].rank,
            rows,
        },
        teachers,
    ))
}
