//! End-to-end experiment on the procedural shapes task.
//!
//! A [`Workbench`] owns the generated data and builds the shared artefacts
//! lazily: the broad-data teacher, its adapted copy, the transfer set and
//! the teacher output caches. Student runs for any method and seed then
//! reuse them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_pretrained_partial, PartialLoadReport};
use crate::config::{ExperimentConfig, Method};
use crate::data::{subset_labels, LabeledDataset, TransferSet};
use crate::diffusion::{
    self, augment_base_set, DenoiserConfig, DenoiserTraining, DiffusionSchedule,
};
use crate::error::{CoreError, Result};
use crate::lora::LoraConfig;
use crate::metrics::{Hd95Mode, MetricsReport};
use crate::models::{Student, StudentConfig, Teacher, TeacherConfig};
use crate::rng;
use crate::shapes::{foundation_dataset, target_dataset};
use crate::trainer::{
    evaluate_student, evaluate_teacher, finetune_student, finetune_teacher_lora, pretrain_mae,
    pretrain_moco, pretrain_ta_kd_cached, pretrain_teacher_supervised, pretrain_ts_kd_cached,
    RunRecord, TeacherCache,
};

/// Target-task data: a pool for labels and transfer images, plus a test set.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub pool: LabeledDataset,
    pub test: LabeledDataset,
}

impl TaskData {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.data;
        Ok(Self {
            pool: target_dataset(d.image_size, d.pool_size, d.data_seed, "pool")?,
            test: target_dataset(d.image_size, d.test_size, d.data_seed, "test")?,
        })
    }
}

/// Outcome of one student run.
#[derive(Debug, Clone)]
pub struct StudentRun {
    pub method: Method,
    pub seed: u64,
    pub transfer_size: usize,
    pub student: Student,
    pub pretrain: Option<RunRecord>,
    pub finetune: RunRecord,
    pub metrics: MetricsReport,
}

pub struct Workbench {
    pub cfg: ExperimentConfig,
    pub data: TaskData,
    foundation: Option<Teacher>,
    adapted: Option<Teacher>,
    transfer_parts: Option<(TransferSet, TransferSet)>,
    caches: BTreeMap<(bool, usize), TeacherCache>,
    generic: Option<Student>,
    /// Records of the shared stages, in the order they ran.
    pub records: Vec<RunRecord>,
}

impl Workbench {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = TaskData::generate(&cfg)?;
        Ok(Self {
            cfg,
            data,
            foundation: None,
            adapted: None,
            transfer_parts: None,
            caches: BTreeMap::new(),
            generic: None,
            records: Vec::new(),
        })
    }

    fn classes(&self) -> usize {
        self.data.pool.class_count()
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        let mut c = TeacherConfig::desk(self.classes());
        c.encoder.image_size = self.cfg.data.image_size;
        c
    }

    pub fn student_config(&self) -> StudentConfig {
        let mut c = StudentConfig::desk(self.classes());
        c.encoder.image_size = self.cfg.data.image_size;
        c
    }

    /// Teacher trained on the broad corpus, with a fresh head for the
    /// target classes. Never adapted.
    pub fn foundation_teacher(&mut self) -> Result<&Teacher> {
        if self.foundation.is_none() {
            let d = &self.cfg.data;
            let corpus = foundation_dataset(d.image_size, d.foundation_size, d.data_seed)?;
            let mut tc = self.teacher_config();
            tc.classes = corpus.class_count();
            let mut teacher = Teacher::new(tc, d.data_seed)?;
            let record = pretrain_teacher_supervised(
                &mut teacher,
                &corpus,
                &self.cfg.schedules.foundation,
                d.data_seed,
            )?;
            self.records.push(record);
            teacher.reset_head(self.classes(), d.data_seed)?;
            self.foundation = Some(teacher);
        }
        Ok(self.foundation.as_ref().unwrap())
    }

    pub fn set_foundation_teacher(&mut self, teacher: Teacher) {
        self.foundation = Some(teacher);
        self.caches.retain(|&(adapted, _), _| adapted);
    }

    /// The foundation teacher after low-rank adaptation on the teacher
    /// label subset.
    pub fn adapted_teacher(&mut self) -> Result<&Teacher> {
        if self.adapted.is_none() {
            let mut teacher = self.foundation_teacher()?.clone();
            let d = &self.cfg.data;
            let labeled = subset_labels(&self.data.pool, d.teacher_labels, d.data_seed)?;
            let lora = LoraConfig::new(self.cfg.lora_rank);
            let record = finetune_teacher_lora(
                &mut teacher,
                &labeled,
                &lora,
                &self.cfg.schedules.teacher_lora,
                d.data_seed,
            )?;
            self.records.push(record);
            self.adapted = Some(teacher);
        }
        Ok(self.adapted.as_ref().unwrap())
    }

    pub fn set_adapted_teacher(&mut self, teacher: Teacher) -> Result<()> {
        if !teacher.fine_tuned {
            return Err(CoreError::Config(
                "teacher has not been adapted to the task".into(),
            ));
        }
        self.adapted = Some(teacher);
        self.caches.retain(|&(adapted, _), _| !adapted);
        Ok(())
    }

    pub fn teacher_metrics(&mut self) -> Result<MetricsReport> {
        let test = self.data.test.clone();
        evaluate_teacher(self.adapted_teacher()?, &test, Hd95Mode::Pooled)
    }

    fn largest_transfer(&self) -> usize {
        self.cfg.transfer_size
    }

    /// Builds the augmented and diffusion-sampled parts for the largest
    /// configured transfer size; smaller sets take prefixes of each part.
    fn transfer_parts(&mut self) -> Result<&(TransferSet, TransferSet)> {
        if self.transfer_parts.is_none() {
            let t = &self.cfg.transfer;
            let seed = self.cfg.data.data_seed;
            let (n_aug, n_diff) = t.split(self.largest_transfer());
            let base = self.data.pool.images();
            let augmented = augment_base_set(&base, &t.augmentation(n_aug), seed)?;
            let sampled = if n_diff > 0 {
                let training_set = augment_base_set(
                    &base,
                    &t.augmentation(base.len().max(64)),
                    rng::derive(seed, "denoiser-data"),
                )?;
                let sched = DiffusionSchedule::standard(t.diffusion_steps)?;
                let dcfg = DenoiserConfig::desk(self.cfg.data.image_size);
                let training = DenoiserTraining::desk(t.denoiser_train_steps);
                let (model, losses) = diffusion::train_denoiser(
                    &training_set.images,
                    &dcfg,
                    &sched,
                    &training,
                    seed,
                )?;
                let mut record = RunRecord::new(
                    "denoiser",
                    serde_json::json!({ "denoiser": dcfg, "training": training, "diffusion_steps": t.diffusion_steps }),
                    seed,
                );
                record.loss_curve = losses;
                self.records.push(record);
                diffusion::sample(&model, &sched, n_diff, seed)?
            } else {
                TransferSet::new(Vec::new(), crate::data::Provenance::DiffusionSampled)?
            };
            self.transfer_parts = Some((augmented, sampled));
        }
        Ok(self.transfer_parts.as_ref().unwrap())
    }

    /// Transfer set of `size` images (at most the configured size).
    pub fn transfer(&mut self, size: usize) -> Result<TransferSet> {
        if size > self.largest_transfer() {
            return Err(CoreError::Config(format!(
                "transfer size {size} exceeds the configured {}",
                self.largest_transfer()
            )));
        }
        let (n_aug, n_diff) = self.cfg.transfer.split(size);
        let (aug, diff) = self.transfer_parts()?;
        TransferSet::combine(vec![aug.truncated(n_aug), diff.truncated(n_diff)])
    }

    pub fn set_transfer(&mut self, transfer: TransferSet) {
        self.cfg.transfer_size = transfer.len();
        let (n_aug, _) = self.cfg.transfer.split(transfer.len());
        let diff = TransferSet {
            images: transfer.images[n_aug..].to_vec(),
            provenance: transfer.provenance,
        };
        let aug = TransferSet {
            images: transfer.images[..n_aug].to_vec(),
            provenance: transfer.provenance,
        };
        self.transfer_parts = Some((aug, diff));
        self.caches.clear();
    }

    fn cache(&mut self, adapted: bool, size: usize) -> Result<(TransferSet, TeacherCache)> {
        let transfer = self.transfer(size)?;
        if !self.caches.contains_key(&(adapted, size)) {
            let teacher = if adapted {
                self.adapted_teacher()?
            } else {
                self.foundation_teacher()?
            };
            let cache = TeacherCache::build(teacher, &transfer.images)?;
            self.caches.insert((adapted, size), cache);
        }
        Ok((transfer, self.caches[&(adapted, size)].clone()))
    }

    /// Student with masked-autoencoder weights from the broad corpus at a
    /// different input size, to be loaded partially.
    fn generic_checkpoint(&mut self) -> Result<&Student> {
        if self.generic.is_none() {
            let d = &self.cfg.data;
            let corpus = foundation_dataset(
                d.generic_image_size,
                d.foundation_size,
                rng::derive(d.data_seed, "generic"),
            )?;
            let mut sc = StudentConfig::desk(self.classes());
            sc.encoder.image_size = d.generic_image_size;
            let mut generic = Student::new(sc, d.data_seed)?;
            let images = TransferSet::new(corpus.images(), crate::data::Provenance::Augmented)?;
            let record = pretrain_mae(
                &mut generic,
                &images,
                &self.cfg.schedules.mae,
                &self.cfg.mae,
                d.data_seed,
            )?;
            self.records.push(record);
            self.generic = Some(generic);
        }
        Ok(self.generic.as_ref().unwrap())
    }

    /// Initialises a student for `method` with `seed`, running its
    /// pretraining stage if it has one.
    pub fn pretrained_student(
        &mut self,
        method: Method,
        transfer_size: usize,
        seed: u64,
    ) -> Result<(Student, Option<RunRecord>, Option<PartialLoadReport>)> {
        let mut student = Student::new(self.student_config(), seed)?;
        let sched = self.cfg.schedules.clone();
        let record = match method {
            Method::Scratch => None,
            Method::ImagenetMae => {
                let bundle = self.generic_checkpoint()?.to_bundle(0);
                let report = load_pretrained_partial(&mut student.params, &bundle);
                return Ok((student, None, Some(report)));
            }
            Method::Mae => {
                let transfer = self.transfer(transfer_size)?;
                Some(pretrain_mae(
                    &mut student,
                    &transfer,
                    &sched.mae,
                    &self.cfg.mae,
                    seed,
                )?)
            }
            Method::Moco => {
                let transfer = self.transfer(transfer_size)?;
                Some(pretrain_moco(
                    &mut student,
                    &transfer,
                    &sched.moco,
                    &self.cfg.moco,
                    seed,
                )?)
            }
            Method::TaKd => {
                let (transfer, cache) = self.cache(false, transfer_size)?;
                Some(pretrain_ta_kd_cached(
                    &mut student,
                    &cache,
                    &transfer,
                    &sched.kd,
                    seed,
                )?)
            }
            Method::TsKd => {
                let dcfg = self.cfg.distillation_config()?;
                let (transfer, cache) = self.cache(true, transfer_size)?;
                Some(pretrain_ts_kd_cached(
                    &mut student,
                    &cache,
                    &transfer,
                    &dcfg,
                    &sched.kd,
                    seed,
                )?)
            }
        };
        Ok((student, record, None))
    }

    /// Pretrain (per method), fine-tune on `label_budget` labels drawn with
    /// `seed`, and score on the test set.
    pub fn run_student(
        &mut self,
        method: Method,
        transfer_size: usize,
        seed: u64,
    ) -> Result<StudentRun> {
        let (mut student, pretrain, _) = self.pretrained_student(method, transfer_size, seed)?;
        let labeled = subset_labels(&self.data.pool, self.cfg.label_budget, seed)?;
        let finetune =
            finetune_student(&mut student, &labeled, &self.cfg.schedules.finetune, seed)?;
        let metrics = evaluate_student(&student, &self.data.test, Hd95Mode::Pooled)?;
        Ok(StudentRun {
            method,
            seed,
            transfer_size: if method.uses_transfer_set() {
                transfer_size
            } else {
                0
            },
            student,
            pretrain,
            finetune,
            metrics,
        })
    }
}

/// One cell of a comparison: method, transfer size, seed and its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub method: Method,
    pub transfer_size: usize,
    pub label_budget: usize,
    pub seed: u64,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub rows: Vec<StudyRow>,
    pub teacher_dice: Option<f64>,
}

impl Study {
    /// Median Dice over seeds of the cells matching `method` and `transfer_size`.
    pub fn median_dice(&self, method: Method, transfer_size: usize) -> Option<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.transfer_size == transfer_size)
            .map(|r| r.mean_dice)
            .collect();
        median(&mut v)
    }
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Runs every `(method, transfer size)` cell for every seed.
pub fn run_study(bench: &mut Workbench, cells: &[(Method, usize)], seeds: &[u64]) -> Result<Study> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &(method, size) in cells {
            let run = bench.run_student(method, size, seed)?;
            log::info!(
                "{method} transfer={} seed={seed}: dice {:.4}",
                run.transfer_size,
                run.metrics.mean_dice
            );
            rows.push(StudyRow {
                method,
                transfer_size: run.transfer_size,
                label_budget: bench.cfg.label_budget,
                seed,
                mean_dice: run.metrics.mean_dice,
                mean_hd95: run.metrics.mean_hd95,
            });
        }
    }
    let teacher_dice = if cells.iter().any(|(m, _)| m.needs_adapted_teacher()) {
        Some(bench.teacher_metrics()?.mean_dice)
    } else {
        None
    };
    Ok(Study { rows, teacher_dice })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
