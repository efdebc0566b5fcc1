use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Desk config shrunk to a couple of seconds of training.
fn small_config(dir: &Path, out: &Path, epochs: usize) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{
  "embedding": {{"preset": "desk"}},
  "train": {{"batch_size": 4, "epochs": {epochs}, "samples_per_epoch": 12,
             "lr_initial": 0.05, "lr_final": 0.005, "score_scale": 0.01,
             "eval_pairs": 4, "seed": 3}},
  "scd": {{"layers": [2, 3], "pair_budget": 50}},
  "output": {{"dir": "{}", "metrics_per_epoch": 3}}
}}"#,
        out.display()
    );
    let path = dir.join("config.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn shapes_prints_the_table1_chain() {
    let o = scd(&["shapes", "--preset", "table1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let conv1 = text.lines().find(|l| l.starts_with("conv1")).unwrap();
    assert!(conv1.contains("59x59") && conv1.contains("123x123"), "{conv1}");
    let conv5 = text.lines().find(|l| l.starts_with("conv5")).unwrap();
    assert!(conv5.contains("17x17") && conv5.contains("49x49"), "{conv5}");
}

#[test]
fn gradcheck_passes() {
    let o = scd(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("ok")).count(), 8);
}

#[test]
fn zero_epochs_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &dir.path().join("run"), 0);
    let o = scd(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.epochs"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"embedding": {"preset": "desk"}, "optimizer": {}}"#).unwrap();
    let o = scd(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("optimizer"));
}

#[test]
fn train_writes_reproducible_outputs_and_report_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &dir.path().join("unused"), 2);
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = scd(&["train", "--config", cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("metrics.csv")).unwrap());
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,lr,task_loss,scd_loss_mean,combined_loss,\
         meanAbsP_l2,maxAbsP_l2,fracOver_l2,meanAbsP_l3,maxAbsP_l3,fracOver_l3"
    );
    assert_eq!(lines.count(), 2 * 3);
    assert!(a.join("reports/epoch_002.json").exists());
    assert!(a.join("checkpoints/epoch_001.bin").exists());

    let o = scd(&["report", "--config", cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["layers"].as_array().unwrap().len(), 2);

    let other_seed = dir.path().join("c");
    scd(&["train", "--config", cfg, "--out", other_seed.to_str().unwrap(), "--seed", "4"]);
    assert_ne!(csv, fs::read_to_string(other_seed.join("metrics.csv")).unwrap());
}

#[test]
fn report_on_a_missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = scd(&["report", "--preset", "desk", "--checkpoint", dir.path().join("none.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
