use std::path::Path;
use std::process::{Command, Output};

fn lmproto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmproto"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn selftest_exits_zero() {
    let out = lmproto(&["selftest"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("[ok] gradient"));
    assert!(!stdout.contains("[FAIL]"));
}

#[test]
fn usage_errors_exit_one() {
    let out = lmproto(&["eval", "--data", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--ckpt"));
    assert!(stderr.contains("Usage"));
    assert_eq!(lmproto(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lmproto(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("missing.ckpt"));
    let out = lmproto(&["eval", "--ckpt", &missing, "--data", &missing]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"LMPN\x01").unwrap();
    let out = lmproto(&[
        "export-emb",
        "--ckpt",
        &s(&garbage),
        "--data",
        &missing,
        "--out",
        &missing,
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(lmproto(&[
        "synth",
        "--out-dir",
        &s(d),
        "--relations",
        "8",
        "--instances",
        "20",
        "--seed",
        "3"
    ])
    .status
    .success());
    let cfg = d.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"word_dim": 8, "filters": 8, "phrase_filters": 4, "phrase_hidden": 4},
            "train_episode": {"n_way": 5, "k_shot": 1, "n_query": 2}, "episodes": 6, "eval_every": 3, "val_episodes": 10}"#,
    )
    .unwrap();
    let (train, val, ckpt, csv) = (
        d.join("train.json"),
        d.join("val.json"),
        d.join("m.ckpt"),
        d.join("r.csv"),
    );
    let out = lmproto(&[
        "train",
        "--config",
        &s(&cfg),
        "--train",
        &s(&train),
        "--val",
        &s(&val),
        "--out",
        &s(&ckpt),
        "--seed",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = String::from_utf8(out.stdout).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("3\t"));

    let out = lmproto(&[
        "eval",
        "--ckpt",
        &s(&ckpt),
        "--data",
        &s(&d.join("unsignaled.json")),
        "--nway",
        "5",
        "--kshot",
        "2",
        "--episodes",
        "30",
        "--seed",
        "2",
        "--csv",
        &s(&csv),
        "--method",
        "knn",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert!(lines[0].starts_with('#'));
    assert_eq!(lines[1], "model,setting,n_episodes,accuracy,ci95,seed");
    assert!(lines[2].starts_with("KNN (FGF),5-way-2-shot,30,"));
    assert!(lines[2].ends_with(",2"));
}
