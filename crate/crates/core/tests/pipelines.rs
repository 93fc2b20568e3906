//! Small end-to-end runs of each training stage plus persistence round trips.

use kd_core::checkpoint::{load_checkpoint, save_checkpoint};
use kd_core::data::{load_dataset, subset_labels, Provenance, TransferSet};
use kd_core::lora::{self, LoraConfig};
use kd_core::models::{Student, StudentConfig, Teacher, TeacherConfig};
use kd_core::shapes::target_dataset;
use kd_core::trainer::*;

fn tiny_sched(mut s: Schedule, epochs: usize, batch: usize) -> Schedule {
    s.epochs = epochs;
    s.batch_size = batch;
    s.warmup_iters = 1;
    s.base_lr = 1e-3;
    s
}

fn transfer(n: usize, seed: u64) -> TransferSet {
    TransferSet::new(
        target_dataset(64, n, seed, "tr").unwrap().images(),
        Provenance::Augmented,
    )
    .unwrap()
}

#[test]
fn student_checkpoint_roundtrip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let s = Student::new(StudentConfig::desk(3), 1).unwrap();
    let path = dir.path().join("student.ckpt");
    save_checkpoint(&s.to_bundle(7), &path).unwrap();
    let back = Student::from_bundle(&load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(back.params.count(false), s.params.count(false));
    for p in s.params.iter() {
        assert_eq!(back.params.get(&p.name).unwrap(), &p.value);
    }

    // a truncated file must be rejected, not partially loaded
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn adapted_teacher_checkpoint_keeps_adapters_and_freezing() {
    let mut t = Teacher::new(TeacherConfig::desk(3), 2).unwrap();
    lora::inject(&mut t.params, &LoraConfig::new(2), 2).unwrap();
    t.fine_tuned = true;
    let back = Teacher::from_bundle(&t.to_bundle(1)).unwrap();
    assert!(back.fine_tuned);
    assert!(lora::has_adapters(&back.params));
    assert_eq!(back.params.count(true), t.params.count(true));
    let ds = target_dataset(64, 1, 2, "x").unwrap();
    let img = &ds.samples()[0].image;
    assert_eq!(
        back.predict_raw(img).unwrap().1,
        t.predict_raw(img).unwrap().1
    );
}

#[test]
fn datasets_and_transfer_sets_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = target_dataset(64, 4, 3, "rt").unwrap();
    ds.save(&dir.path().join("ds")).unwrap();
    let back = load_dataset(&dir.path().join("ds"), 3).unwrap();
    assert_eq!(back.ids(), ds.ids());
    for (a, b) in back.samples().iter().zip(ds.samples()) {
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.image.to_u8(), b.image.to_u8());
    }

    let t = transfer(3, 3);
    let manifest = t.save(&dir.path().join("tr"), 3, None).unwrap();
    let (loaded, m2) = TransferSet::load(&dir.path().join("tr")).unwrap();
    assert_eq!(manifest, m2);
    assert_eq!(loaded.len(), 3);
    assert_eq!(loaded.provenance, Provenance::Augmented);
}

#[test]
fn label_subsets_are_seeded_and_bounded() {
    let ds = target_dataset(64, 10, 4, "sub").unwrap();
    let a = subset_labels(&ds, 4, 9).unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(a.ids(), subset_labels(&ds, 4, 9).unwrap().ids());
    assert!(a.ids().iter().all(|id| ds.ids().contains(id)));
    assert!(subset_labels(&ds, 0, 9).is_err());
    assert!(subset_labels(&ds, 11, 9).is_err());
}

#[test]
fn moco_pretraining_is_deterministic_and_leaves_head() {
    let tr = transfer(6, 5);
    let opts = MocoOptions {
        queue_size: 8,
        ..Default::default()
    };
    let sched = tiny_sched(Schedule::moco(), 2, 3);
    let run = || {
        let mut s = Student::new(StudentConfig::desk(3), 5).unwrap();
        let before = s.params.get("head.cls.weight").unwrap().clone();
        let rec = pretrain_moco(&mut s, &tr, &sched, &opts, 5).unwrap();
        assert_eq!(s.params.get("head.cls.weight").unwrap(), &before);
        rec.loss_curve
    };
    let a = run();
    assert_eq!(a.len(), 4);
    assert!(a.iter().all(|v| v.is_finite() && *v > 0.0));
    assert_eq!(a, run());

    let bad = MocoOptions {
        queue_size: 2,
        ..Default::default()
    };
    let mut s = Student::new(StudentConfig::desk(3), 5).unwrap();
    assert!(pretrain_moco(&mut s, &tr, &sched, &bad, 5).is_err());
}

#[test]
fn mae_pretraining_reduces_reconstruction_loss() {
    let tr = transfer(4, 6);
    let sched = tiny_sched(Schedule::mae(), 15, 4);
    let mut s = Student::new(StudentConfig::desk(3), 6).unwrap();
    let rec = pretrain_mae(&mut s, &tr, &sched, &MaeOptions::default(), 6).unwrap();
    assert_eq!(rec.loss_curve.len(), 15);
    let sm = smooth(&rec.loss_curve, 3);
    assert!(sm[sm.len() - 1] < sm[2], "{:?}", rec.loss_curve);
    assert!(!s.params.names().any(|n| n.starts_with("mae.")));
}

#[test]
fn distillation_rejects_teacher_state_mismatch() {
    let tr = transfer(2, 7);
    let sched = tiny_sched(Schedule::kd(), 1, 2);
    let teacher = Teacher::new(TeacherConfig::desk(3), 7).unwrap();
    let mut s = Student::new(StudentConfig::desk(3), 7).unwrap();
    let cfg = DistillationConfig::ts_kd(2).unwrap();
    // task-specific distillation needs an adapted teacher
    assert!(pretrain_ts_kd(&mut s, &teacher, &tr, &cfg, &sched, 7).is_err());
    let mut adapted = teacher.clone();
    adapted.fine_tuned = true;
    assert!(pretrain_ta_kd(&mut s, &adapted, &tr, &sched, 7).is_err());
}

#[test]
fn rank_sweep_selects_from_requested_ranks() {
    let base = Teacher::new(TeacherConfig::desk(3), 8).unwrap();
    let labeled = target_dataset(64, 2, 8, "rs").unwrap();
    let val = target_dataset(64, 2, 8, "rv").unwrap();
    let sched = tiny_sched(Schedule::teacher_lora(), 1, 2);
    let (sweep, teachers) = lora_rank_sweep(
        &base,
        &labeled,
        &val,
        &[1, 4],
        &LoraConfig::new(1),
        &sched,
        8,
    )
    .unwrap();
    assert_eq!(teachers.len(), 2);
    assert_eq!(
        sweep.rows.iter().map(|r| r.rank).collect::<Vec<_>>(),
        vec![1, 4]
    );
    assert!(sweep.rows[0].trainable_params < sweep.rows[1].trainable_params);
    assert!([1, 4].contains(&sweep.selected_rank));
    assert_eq!(sweep.to_csv().lines().count(), 3);
}
