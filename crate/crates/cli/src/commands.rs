//! One function per subcommand. Shared stages run with the data seed unless
//! a `--seed` is given; student stages use the experiment seed.

use std::path::PathBuf;

use kd_core::checkpoint::{load_checkpoint, save_checkpoint};
use kd_core::config::{ExperimentConfig, Method};
use kd_core::data::{load_dataset, subset_labels, LabeledDataset, Provenance, TransferSet};
use kd_core::diffusion::{
    self, augment_base_set, evaluate_transfer, Denoiser, DenoiserConfig, DenoiserTraining,
    DiffusionSchedule,
};
use kd_core::experiment::{TaskData, Workbench};
use kd_core::lora::LoraConfig;
use kd_core::metrics::{evaluate_masks, Hd95Mode, MetricsReport};
use kd_core::models::{Student, Teacher};
use kd_core::rng;
use kd_core::shapes::target_dataset;
use kd_core::trainer::{
    evaluate_student, evaluate_teacher, finetune_student, lora_rank_sweep, RunRecord,
};

use crate::error::{CliError, CliResult};
use crate::workspace::{require, save_record, write, CellLock, Work};

const DIFFUSION_STEPS_ATTR: &str = "diffusion_steps";

pub fn augment(
    work: &Work,
    cfg: ExperimentConfig,
    size: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let seed = seed.unwrap_or(cfg.data.data_seed);
    let data = TaskData::generate(&cfg)?;
    let set = augment_base_set(&data.pool.images(), &cfg.transfer.augmentation(size), seed)?;
    let out = out.unwrap_or_else(|| work.augmented());
    let manifest = set.save(&out, seed, None)?;
    println!(
        "wrote {} augmented images to {}",
        manifest.count,
        out.display()
    );
    Ok(())
}

pub fn diffusion_train(
    work: &Work,
    mut cfg: ExperimentConfig,
    steps: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    if let Some(s) = steps {
        cfg.transfer.denoiser_train_steps = s;
    }
    let seed = seed.unwrap_or(cfg.data.data_seed);
    let data = TaskData::generate(&cfg)?;
    let base = data.pool.images();
    let spec = cfg.transfer.augmentation(base.len().max(64));
    let training_set = augment_base_set(&base, &spec, rng::derive(seed, "denoiser-data"))?;
    let sched = DiffusionSchedule::standard(cfg.transfer.diffusion_steps)?;
    let dcfg = DenoiserConfig::desk(cfg.data.image_size);
    let training = DenoiserTraining::desk(cfg.transfer.denoiser_train_steps);
    let start = std::time::Instant::now();
    let (model, losses) =
        diffusion::train_denoiser(&training_set.images, &dcfg, &sched, &training, seed)?;

    let dir = out.unwrap_or_else(|| work.diffusion());
    let mut bundle = model.to_bundle(training.steps as u64);
    bundle.meta.attrs.insert(
        DIFFUSION_STEPS_ATTR.into(),
        cfg.transfer.diffusion_steps.to_string(),
    );
    save_checkpoint(&bundle, &dir.join("denoiser.ckpt"))?;
    let mut record = RunRecord::new(
        "denoiser",
        serde_json::json!({ "denoiser": dcfg, "training": training, "diffusion_steps": sched.steps() }),
        seed,
    );
    record.loss_curve = losses;
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    record.checkpoint_id = Some(bundle.meta.config_hash.clone());
    save_record(record, &cfg, &dir)?;
    println!(
        "trained denoiser for {} steps; checkpoint in {}",
        training.steps,
        dir.display()
    );
    Ok(())
}

pub fn diffusion_sample(
    work: &Work,
    cfg: ExperimentConfig,
    size: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let seed = seed.unwrap_or(cfg.data.data_seed);
    let out = out.unwrap_or_else(|| work.sampled());
    let (set, schedule_hash) = if size == 0 {
        (
            TransferSet::new(Vec::new(), Provenance::DiffusionSampled)?,
            None,
        )
    } else {
        require(&work.denoiser(), "trained denoiser", "diffusion-train")?;
        let bundle = load_checkpoint(&work.denoiser())?;
        let steps = bundle
            .meta
            .attrs
            .get(DIFFUSION_STEPS_ATTR)
            .and_then(|s| s.parse().ok())
            .unwrap_or(cfg.transfer.diffusion_steps);
        let model = Denoiser::from_bundle(&bundle)?;
        let sched = DiffusionSchedule::standard(steps)?;
        (
            diffusion::sample(&model, &sched, size, seed)?,
            Some(sched.hash()),
        )
    };
    let manifest = set.save(&out, seed, schedule_hash)?;
    println!(
        "wrote {} sampled images to {}",
        manifest.count,
        out.display()
    );
    Ok(())
}

pub fn eval_transfer(
    work: &Work,
    generated: Option<PathBuf>,
    reference: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let generated = generated.unwrap_or_else(|| work.sampled());
    let reference = reference.unwrap_or_else(|| work.augmented());
    require(
        &generated.join("manifest.json"),
        "generated set",
        "diffusion-sample",
    )?;
    require(&reference.join("manifest.json"), "reference set", "augment")?;
    let (g, _) = TransferSet::load(&generated)?;
    let (r, _) = TransferSet::load(&reference)?;
    let q = evaluate_transfer(&g.images, &r.images)?;
    let json = serde_json::json!({
        "generated": generated,
        "reference": reference,
        "mean_mse": q.mean_mse,
        "mean_psnr": q.mean_psnr.is_finite().then_some(q.mean_psnr),
        "matches": q.matches,
    });
    let out = out.unwrap_or_else(|| work.diffusion().join("transfer_quality.json"));
    write(
        &out,
        serde_json::to_string_pretty(&json).expect("json serialises"),
    )?;
    println!(
        "mean mse {:.6}, mean psnr {:.3} dB",
        q.mean_mse, q.mean_psnr
    );
    Ok(())
}

/// Loads the foundation teacher or trains and saves it.
fn foundation_teacher(work: &Work, bench: &mut Workbench) -> CliResult<Teacher> {
    if work.foundation().exists() {
        let t = Teacher::from_bundle(&load_checkpoint(&work.foundation())?)?;
        bench.set_foundation_teacher(t.clone());
        return Ok(t);
    }
    let start = std::time::Instant::now();
    let teacher = bench.foundation_teacher()?.clone();
    save_checkpoint(&teacher.to_bundle(0), &work.foundation())?;
    if let Some(mut record) = bench.records.pop() {
        record.wall_clock_secs = start.elapsed().as_secs_f64();
        save_record(record, &bench.cfg, &work.teacher().join("foundation"))?;
    }
    Ok(teacher)
}

fn save_adapted(
    work: &Work,
    cfg: &ExperimentConfig,
    teacher: &Teacher,
    test: &LabeledDataset,
) -> CliResult<MetricsReport> {
    save_checkpoint(&teacher.to_bundle(0), &work.adapted())?;
    write(&work.selected_rank(), format!("{}\n", cfg.lora_rank))?;
    let metrics = evaluate_teacher(teacher, test, Hd95Mode::Pooled)?;
    write(
        &work.teacher().join("adapted_metrics.csv"),
        metrics.to_csv(),
    )?;
    Ok(metrics)
}

pub fn teacher_finetune(work: &Work, mut cfg: ExperimentConfig, rank: usize) -> CliResult<()> {
    LoraConfig::new(rank).validate()?;
    cfg.lora_rank = rank;
    cfg.validate()?;
    let mut bench = Workbench::new(cfg.clone())?;
    foundation_teacher(work, &mut bench)?;
    let start = std::time::Instant::now();
    let teacher = bench.adapted_teacher()?.clone();
    let mut record = bench.records.pop().expect("adaptation leaves a record");
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    let metrics = save_adapted(work, &cfg, &teacher, &bench.data.test)?;
    record
        .notes
        .insert("test_mean_dice".into(), format!("{:.6}", metrics.mean_dice));
    save_record(record, &cfg, &work.teacher().join("adapted"))?;
    println!(
        "adapted teacher with rank {rank}: test mean dice {:.4}",
        metrics.mean_dice
    );
    Ok(())
}

pub fn rank_sweep(work: &Work, cfg: ExperimentConfig, ranks: &[usize]) -> CliResult<()> {
    for &r in ranks {
        LoraConfig::new(r).validate()?;
    }
    let mut bench = Workbench::new(cfg.clone())?;
    let base = foundation_teacher(work, &mut bench)?;
    let d = &cfg.data;
    let labeled = subset_labels(&bench.data.pool, d.teacher_labels, d.data_seed)?;
    let validation = target_dataset(
        d.image_size,
        d.test_size,
        rng::derive(d.data_seed, "validation"),
        "val",
    )?;
    let template = LoraConfig::new(ranks[0]);
    let (sweep, teachers) = lora_rank_sweep(
        &base,
        &labeled,
        &validation,
        ranks,
        &template,
        &cfg.schedules.teacher_lora,
        d.data_seed,
    )?;
    write(&work.teacher().join("rank_sweep.csv"), sweep.to_csv())?;
    let best = sweep
        .rows
        .iter()
        .position(|r| r.rank == sweep.selected_rank)
        .expect("selected rank is one of the rows");
    let seed = d.data_seed;
    let mut cfg = cfg;
    cfg.lora_rank = sweep.selected_rank;
    let metrics = save_adapted(work, &cfg, &teachers[best], &bench.data.test)?;
    let mut record = RunRecord::new(
        "rank-sweep",
        serde_json::json!({ "ranks": ranks, "sweep": sweep }),
        seed,
    );
    record
        .notes
        .insert("selected_rank".into(), sweep.selected_rank.to_string());
    record
        .notes
        .insert("test_mean_dice".into(), format!("{:.6}", metrics.mean_dice));
    save_record(record, &cfg, &work.teacher().join("rank_sweep"))?;
    println!("selected rank {} of {:?}", sweep.selected_rank, ranks);
    Ok(())
}

fn load_transfer(work: &Work, cfg: &ExperimentConfig) -> CliResult<TransferSet> {
    let (n_aug, n_diff) = cfg.transfer.split(cfg.transfer_size);
    let mut parts = Vec::new();
    for (n, dir, what, command) in [
        (
            n_aug,
            work.augmented(),
            "augmented transfer images",
            "augment",
        ),
        (
            n_diff,
            work.sampled(),
            "diffusion-sampled transfer images",
            "diffusion-sample",
        ),
    ] {
        if n == 0 {
            continue;
        }
        require(&dir.join("manifest.json"), what, command)?;
        let (set, _) = TransferSet::load(&dir)?;
        if set.len() < n {
            return Err(CliError::Missing {
                artifact: format!("{n} {what} (found {} in {})", set.len(), dir.display()),
                command,
            });
        }
        parts.push(set.truncated(n));
    }
    Ok(TransferSet::combine(parts)?)
}

pub fn pretrain(work: &Work, mut cfg: ExperimentConfig) -> CliResult<()> {
    let method = cfg.method;
    if method == Method::Scratch {
        return Err(CliError::Invalid(
            "`scratch` has no pretraining stage; run `finetune` directly".into(),
        ));
    }
    let mut bench = Workbench::new(cfg.clone())?;
    match method {
        Method::TaKd => {
            require(&work.foundation(), "foundation teacher", "teacher-finetune")?;
            bench.set_foundation_teacher(Teacher::from_bundle(&load_checkpoint(
                &work.foundation(),
            )?)?);
        }
        Method::TsKd => {
            require(&work.adapted(), "adapted teacher", "teacher-finetune")?;
            require(
                &work.selected_rank(),
                "selected LoRA rank",
                "teacher-finetune",
            )?;
            let rank = std::fs::read_to_string(work.selected_rank())
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| {
                    CliError::Invalid(format!("unreadable {}", work.selected_rank().display()))
                })?;
            cfg.lora_rank = rank;
            bench.set_adapted_teacher(Teacher::from_bundle(&load_checkpoint(&work.adapted())?)?)?;
        }
        _ => {}
    }
    if method.uses_transfer_set() {
        bench.set_transfer(load_transfer(work, &cfg)?);
    }
    let dir = work.cell(method, cfg.transfer_size, &cfg.distillation, cfg.seed);
    let _lock = CellLock::acquire(&dir)?;
    let start = std::time::Instant::now();
    let (student, record, partial) =
        bench.pretrained_student(method, cfg.transfer_size, cfg.seed)?;
    let mut record =
        record.unwrap_or_else(|| RunRecord::new("partial-load", serde_json::json!({}), cfg.seed));
    if let Some(report) = partial {
        record
            .notes
            .insert("loaded".into(), report.loaded.len().to_string());
        record
            .notes
            .insert("skipped".into(), report.skipped.len().to_string());
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    let bundle = student.to_bundle(record.loss_curve.len() as u64);
    record.checkpoint_id = Some(bundle.meta.config_hash.clone());
    save_checkpoint(&bundle, &dir.join("pretrained.ckpt"))?;
    save_record(record, &cfg, &dir)?;
    println!("pretrained {} student in {}", method, dir.display());
    Ok(())
}

pub fn finetune(work: &Work, cfg: ExperimentConfig) -> CliResult<()> {
    let method = cfg.method;
    let bench = Workbench::new(cfg.clone())?;
    let cell = work.cell(method, cfg.transfer_size, &cfg.distillation, cfg.seed);
    let mut student = if method == Method::Scratch {
        Student::new(bench.student_config(), cfg.seed)?
    } else {
        let path = cell.join("pretrained.ckpt");
        require(&path, &format!("pretrained {method} student"), "pretrain")?;
        Student::from_bundle(&load_checkpoint(&path)?)?
    };
    let dir = cell.join(format!("labels-{}", cfg.label_budget));
    let _lock = CellLock::acquire(&dir)?;
    let labeled = subset_labels(&bench.data.pool, cfg.label_budget, cfg.seed)?;
    let start = std::time::Instant::now();
    let mut record = finetune_student(&mut student, &labeled, &cfg.schedules.finetune, cfg.seed)?;
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    let bundle = student.to_bundle(record.loss_curve.len() as u64);
    record.checkpoint_id = Some(bundle.meta.config_hash.clone());
    save_checkpoint(&bundle, &dir.join("finetuned.ckpt"))?;
    save_record(record, &cfg, &dir)?;
    println!(
        "fine-tuned on {} labels; checkpoint in {}",
        cfg.label_budget,
        dir.display()
    );
    Ok(())
}

pub enum EvalTarget {
    /// The fine-tuned student of the cell named by the flags.
    Cell,
    Checkpoint(PathBuf),
    Predictions(PathBuf),
}

pub fn evaluate(
    work: &Work,
    cfg: ExperimentConfig,
    target: EvalTarget,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let generated = TaskData::generate(&cfg)?;
    let classes = generated.test.class_count();
    let reference = match &data {
        Some(dir) => load_dataset(dir, classes)?,
        None => generated.test,
    };
    let cell_dir = work
        .cell(cfg.method, cfg.transfer_size, &cfg.distillation, cfg.seed)
        .join(format!("labels-{}", cfg.label_budget));
    let (metrics, default_out, source) = match &target {
        EvalTarget::Predictions(dir) => {
            let preds = load_dataset(dir, classes)?;
            if preds.ids() != reference.ids() {
                return Err(CliError::Invalid(format!(
                    "prediction ids in {} do not match the reference ids",
                    dir.display()
                )));
            }
            let p: Vec<_> = preds.samples().iter().map(|s| s.mask.clone()).collect();
            let r: Vec<_> = reference.samples().iter().map(|s| s.mask.clone()).collect();
            let m = evaluate_masks(&p, &r, &reference.class_names, (1.0, 1.0), Hd95Mode::Pooled)?;
            (m, work.root.join("eval"), dir.clone())
        }
        EvalTarget::Checkpoint(path) => {
            let student = Student::from_bundle(&load_checkpoint(path)?)?;
            (
                evaluate_student(&student, &reference, Hd95Mode::Pooled)?,
                work.root.join("eval"),
                path.clone(),
            )
        }
        EvalTarget::Cell => {
            let path = cell_dir.join("finetuned.ckpt");
            require(
                &path,
                &format!("fine-tuned {} student", cfg.method),
                "finetune",
            )?;
            let student = Student::from_bundle(&load_checkpoint(&path)?)?;
            (
                evaluate_student(&student, &reference, Hd95Mode::Pooled)?,
                cell_dir.join("eval"),
                path,
            )
        }
    };
    let dir = out.unwrap_or(default_out);
    write(&dir.join("metrics.csv"), metrics.to_csv())?;
    let mut record = RunRecord::new(
        "evaluate",
        serde_json::json!({ "source": source, "data": data, "metrics": metrics }),
        cfg.seed,
    );
    let cell_run = matches!(target, EvalTarget::Cell);
    let transfer = if cfg.method.uses_transfer_set() {
        cfg.transfer_size
    } else {
        0
    };
    let method_label = if cfg.method == Method::TsKd {
        cfg.distillation.clone()
    } else {
        cfg.method.as_str().to_string()
    };
    if cell_run {
        record.notes.insert("method".into(), method_label);
        record
            .notes
            .insert("transfer_size".into(), transfer.to_string());
        record
            .notes
            .insert("label_budget".into(), cfg.label_budget.to_string());
    }
    record
        .notes
        .insert("mean_dice".into(), format!("{:.6}", metrics.mean_dice));
    record.metrics_id = Some(kd_core::checkpoint::config_hash(&metrics));
    save_record(record, &cfg, &dir)?;
    println!(
        "mean dice {:.4}, mean hd95 {}, mean iou {:.4}",
        metrics.mean_dice,
        metrics
            .mean_hd95
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}")),
        metrics.mean_iou
    );
    Ok(())
}
