use std::path::Path;
use std::process::{Command, Output};

fn tricks(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tricks"))
        .args(args)
        .env_remove("TRICKS_SEED")
        .env_remove("TRICKS_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, epochs: usize) -> String {
    let path = dir.join("run.json");
    std::fs::write(
        &path,
        format!(
            r#"{{
            "seed": 3, "epochs": {epochs}, "batch_size": 8,
            "model": {{"depth": "desk11", "variant": "D", "classes": 3, "input_size": 8}},
            "data": {{"source": {{"kind": "synthetic", "train": 24, "val": 9, "size": 8}}}},
            "schedule": {{"kind": "cosine", "warmup_epochs": 1}},
            "output_dir": "out"
        }}"#
        ),
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn analyze_prints_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("cost.json");
    let out = stdout(&tricks(&[
        "analyze",
        "--depth",
        "50",
        "--variant",
        "B",
        "--input-size",
        "224",
        "--json",
        json.to_str().unwrap(),
    ]));
    assert!(out.contains("params 25.5"), "{out}");
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(doc["input_size"], 224);
    assert!(doc["flops"].as_u64().unwrap() > 4_000_000_000);
}

#[test]
fn schedule_plot_is_csv() {
    let out = stdout(&tricks(&[
        "schedule",
        "--plot",
        "--epochs",
        "4",
        "--warmup-epochs",
        "1",
        "--batches-per-epoch",
        "5",
    ]));
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("batch,lr"));
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let (b, lr) = l.split_once(',').unwrap();
            (b.parse().unwrap(), lr.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 20);
    assert_eq!(rows[0], (1, 0.1 / 5.0));
    assert_eq!(rows[5], (6, 0.1));
}

#[test]
fn train_eval_gap_report_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2);
    let first = stdout(&tricks(&[
        "train",
        "--config",
        &cfg,
        "--stop-after",
        "1",
        "--quiet",
    ]));
    assert!(first.contains("epoch 1:"), "{first}");
    let ckpt1 = dir.path().join("out").join("checkpoint-0001.json");
    assert!(ckpt1.is_file());

    let resumed = stdout(&tricks(&[
        "train",
        "--config",
        &cfg,
        "--resume",
        ckpt1.to_str().unwrap(),
        "--quiet",
    ]));
    assert!(resumed.contains("epoch 2:"), "{resumed}");
    let latest = dir.path().join("out").join("latest.json");

    let csv = dir.path().join("gaps.csv");
    stdout(&tricks(&[
        "gap-report",
        "--checkpoint",
        latest.to_str().unwrap(),
        "--bins",
        "4",
        "--out",
        csv.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("bin_left,bin_right,count\n"));
    let total: usize = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 9);

    // an image directory with a class count the model does not have
    let img = dir.path().join("imgs").join("only").join("a.png");
    std::fs::create_dir_all(img.parent().unwrap()).unwrap();
    std::fs::write(&img, PNG_1X1).unwrap();
    let o = tricks(&[
        "eval",
        "--checkpoint",
        latest.to_str().unwrap(),
        "--data",
        dir.path().join("imgs").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr)
        .contains("model predicts 3 classes but the dataset has 1"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"epochs": 1, "batch_size": 2, "model": {"depth": "desk11", "variant": "A", "classes": 2}, "data": {"source": {"kind": "synthetic", "train": 4, "val": 2, "size": 8}}, "output_dir": "o", "lr": 1}"#).unwrap();
    let o = tricks(&["train", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr"));
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    let o = Command::new(env!("CARGO_BIN_EXE_tricks"))
        .args(["train", "--config", &cfg, "--quiet"])
        .env("TRICKS_SEED", "99")
        .output()
        .unwrap();
    stdout(&o);
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out").join("latest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config"]["seed"], 99);
}

#[test]
fn ablate_writes_one_row_per_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    let out = stdout(&tricks(&[
        "ablate",
        "--config",
        &cfg,
        "--stack",
        "cosine,smooth",
        "--quiet",
    ]));
    assert_eq!(out.lines().count(), 5, "{out}");
    assert!(out.contains("+ label smoothing"));
    assert!(dir.path().join("out").join("ablation.json").is_file());
}

/// A 1x1 RGB PNG.
const PNG_1X1: &[u8] = &[
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52,
    0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x02, 0x00, 0x00, 0x00, 0x90, 0x77, 0x53,
    0xde, 0x00, 0x00, 0x00, 0x0c, 0x49, 0x44, 0x41, 0x54, 0x08, 0xd7, 0x63, 0xf8, 0xcf, 0xc0, 0x00,
    0x00, 0x03, 0x01, 0x01, 0x00, 0x18, 0xdd, 0x8d, 0xb0, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e,
    0x44, 0xae, 0x42, 0x60, 0x82,
];
