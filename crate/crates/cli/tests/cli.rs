//! End-to-end runs of the `tskd` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kd_core::shapes::target_dataset;

const TINY: &str = r#"
label_budget = 4
transfer_size = 10

[data]
image_size = 32
pool_size = 12
test_size = 4
teacher_labels = 6
foundation_size = 8
generic_image_size = 16

[transfer]
denoiser_train_steps = 5
diffusion_steps = 10

[schedules.foundation]
optimizer = "adamw"
base_lr = 0.002
weight_decay = 0.05
warmup_iters = 1
epochs = 1
batch_size = 4
decay = "cosine"

[schedules.teacher_lora]
optimizer = "adamw"
base_lr = 0.005
weight_decay = 0.01
warmup_iters = 1
epochs = 1
batch_size = 4
decay = "cosine"

[schedules.kd]
optimizer = "adam"
base_lr = 0.001
weight_decay = 0.0
warmup_iters = 1
epochs = 1
batch_size = 4
decay = "cosine"

[schedules.finetune]
optimizer = "adamw"
base_lr = 0.001
weight_decay = 0.05
warmup_iters = 1
epochs = 1
batch_size = 2
decay = "cosine"
"#;

fn tskd(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_tskd"))
        .arg("--work")
        .arg(dir.join("work"))
        .arg("--config")
        .arg(&config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tskd(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn sampling_zero_images_needs_no_denoiser() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["diffusion-sample", "--size", "0"]);
    let m = json(&dir.path().join("work/transfer/diffusion/manifest.json"));
    assert_eq!(m["count"], 0);
    assert_eq!(m["files"].as_array().unwrap().len(), 0);
}

#[test]
fn identical_transfer_sets_have_zero_mse() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["augment", "--size", "3"]);
    let aug = dir.path().join("work/transfer/augmented");
    let aug = aug.to_str().unwrap();
    ok(
        dir.path(),
        &["eval-transfer", "--generated", aug, "--reference", aug],
    );
    let q = json(&dir.path().join("work/diffusion/transfer_quality.json"));
    assert_eq!(q["mean_mse"], 0.0);
}

#[test]
fn exit_codes_distinguish_validation_and_missing_dependencies() {
    let dir = tempfile::tempdir().unwrap();
    let out = tskd(dir.path(), &["teacher-finetune", "--rank", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = tskd(dir.path(), &["pretrain", "--method", "ts_kd"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tskd teacher-finetune"));

    let out = tskd(dir.path(), &["pretrain", "--method", "moco"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tskd augment"));

    ok(dir.path(), &["augment", "--size", "8"]);
    let out = tskd(dir.path(), &["pretrain", "--method", "moco"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tskd diffusion-sample"));

    let out = tskd(
        dir.path(),
        &["finetune", "--method", "mae", "--labels", "2"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tskd pretrain"));

    let out = tskd(dir.path(), &["report"]);
    assert_eq!(out.status.code(), Some(3));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tskd"))
        .args(["--config", bad.to_str().unwrap(), "augment", "--size", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn perfect_predictions_score_dice_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("fixture");
    target_dataset(32, 3, 5, "fx").unwrap().save(&data).unwrap();
    let d = data.to_str().unwrap();
    let stdout = ok(dir.path(), &["evaluate", "--pred", d, "--data", d]);
    assert!(stdout.contains("mean dice 1.0000"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("work/eval/metrics.csv")).unwrap();
    let mean = csv.lines().find(|l| l.starts_with("mean,")).unwrap();
    assert!(
        mean.starts_with("mean,1.000000,0.000000,1.000000"),
        "{mean}"
    );
}

#[test]
fn rank_sweep_is_deterministic_with_one_row_per_rank() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["rank-sweep", "--ranks", "1,2,4"]);
    ok(b.path(), &["rank-sweep", "--ranks", "1,2,4"]);
    let csv = fs::read_to_string(a.path().join("work/teacher/rank_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(
        csv,
        fs::read_to_string(b.path().join("work/teacher/rank_sweep.csv")).unwrap()
    );
    let rank = fs::read_to_string(a.path().join("work/teacher/selected_rank.txt")).unwrap();
    assert!(["1", "2", "4"].contains(&rank.trim()));
}

#[test]
fn full_chain_produces_report_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["augment", "--size", "8"]);
    ok(p, &["diffusion-train", "--steps", "3"]);
    ok(p, &["diffusion-sample", "--size", "2"]);
    ok(p, &["teacher-finetune", "--rank", "2"]);
    for seed in ["1", "2"] {
        for method in ["ta_kd", "ts_kd"] {
            ok(p, &["pretrain", "--method", method, "--seed", seed]);
        }
        for method in ["scratch", "ta_kd", "ts_kd"] {
            for labels in ["2", "4"] {
                ok(
                    p,
                    &[
                        "finetune", "--method", method, "--labels", labels, "--seed", seed,
                    ],
                );
                ok(
                    p,
                    &[
                        "evaluate", "--method", method, "--labels", labels, "--seed", seed,
                    ],
                );
            }
        }
    }
    ok(p, &["report"]);
    let csv = fs::read_to_string(p.join("work/report/summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,transfer_size,label_budget,runs,mean_dice");
    assert_eq!(lines.len(), 1 + 3 * 2);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(3) == Some("2")));
    assert!(p.join("work/report/dice_vs_labels.svg").exists());
    let bars = fs::read_to_string(p.join("work/report/dice_by_method.svg")).unwrap();
    assert!(bars.contains("ta_kd (10 transfer)") && bars.contains("scratch"));

    // the resolved configuration is echoed, with flags over file values
    let cell = p.join("work/students/ts_kd-t10-ts-kd8/seed-2");
    let record = json(&cell.join("labels-2/record.json"));
    assert_eq!(record["config"]["experiment"]["label_budget"], 2);
    assert_eq!(record["config"]["experiment"]["seed"], 2);
    assert_eq!(record["config"]["experiment"]["data"]["image_size"], 32);
    assert_eq!(
        json(&cell.join("record.json"))["config"]["experiment"]["lora_rank"],
        2
    );

    let before = fs::read(cell.join("record.json")).unwrap();
    let ckpt = fs::read(cell.join("pretrained.ckpt")).unwrap();
    ok(p, &["pretrain", "--method", "ts_kd", "--seed", "2"]);
    assert_eq!(fs::read(cell.join("record.json")).unwrap(), before);
    assert_eq!(fs::read(cell.join("pretrained.ckpt")).unwrap(), ckpt);
    let again = fs::read_to_string(p.join("work/report/summary.csv")).unwrap();
    ok(p, &["report"]);
    assert_eq!(
        fs::read_to_string(p.join("work/report/summary.csv")).unwrap(),
        again
    );
}
