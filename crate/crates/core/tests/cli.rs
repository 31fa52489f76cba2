use std::path::Path;
use std::process::{Command, Output};

fn qrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let config = dir.path().join("config.json");
    let ckpt = dir.path().join("model.ckpt");
    let report = dir.path().join("report.json");
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(
        &config,
        r#"{"m": 16, "d_q": 8, "d_embed": 8, "pgn_hidden": 8, "n": 8, "k": 2,
            "batch_size": 16, "lr": 0.001, "epochs": [1, 1, 1]}"#,
    )
    .unwrap();

    let out = qrc(&["gen-data", "--seed", "3", "--n", "300", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 300);

    let out = qrc(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.path().join("model.ckpt.metrics.jsonl")).unwrap();
    assert!(log.lines().count() > 0);
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }

    let out = qrc(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("accuracy "));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let acc = r["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(r["n_queries"].as_u64().unwrap() > 0);

    let out = qrc(&[
        "predict",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--query-index",
        "0",
        "--out",
        s(&preds),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|p| p["phrase_index"] == 0));
}

#[test]
fn gradcheck_single_operation() {
    let out = qrc(&["gradcheck", "--op", "relu"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.starts_with("relu") && stdout.trim_end().ends_with("ok"));
    assert_eq!(code(&qrc(&["gradcheck", "--op", "no-such-op"])), 1);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&qrc(&["--help"])), 0);
    assert_eq!(code(&qrc(&[])), 1);
    assert_eq!(code(&qrc(&["train"])), 1);
    assert_eq!(
        code(&qrc(&["gen-data", "--n", "x", "--seed", "0", "--out", "o"])),
        1
    );

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let report = dir.path().join("r.json");
    let config = dir.path().join("c.json");
    std::fs::write(&config, "{}").unwrap();
    let out = qrc(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&missing),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&out), 2);

    let corrupt = dir.path().join("corrupt.jsonl");
    std::fs::write(&corrupt, "{\"scene\": \n").unwrap();
    let out = qrc(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&corrupt),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let out = qrc(&[
        "eval",
        "--ckpt",
        s(&missing),
        "--data",
        s(&corrupt),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 2);

    std::fs::write(&config, r#"{"lr": -1.0}"#).unwrap();
    let out = qrc(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&corrupt),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&out), 2);
}
