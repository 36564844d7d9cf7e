use std::path::Path;
use std::process::{Command, Output};

fn psearch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psearch"))
        .args(args)
        .env_remove("PERSON_SEARCH_DATA")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn psearch")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = psearch(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_reports_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ok = psearch(&["prepare-data", "--dataset", "synthetic", "--out", p(&data), "--images", "4"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let out = psearch(&[
        "train",
        "--data",
        p(&data),
        "--config",
        "missing.file",
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("error:") && err.contains("file not found") && err.contains("missing.file"), "{err}");
}

#[test]
fn prepare_without_source_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = psearch(&["prepare-data", "--dataset", "prw", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("PERSON_SEARCH_DATA"));
}

#[test]
fn bad_gallery_size_is_rejected() {
    let out = psearch(&["eval", "--checkpoint", "x", "--data", "y", "--gallery-size", "lots"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synthetic_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let ok = |o: Output| assert!(o.status.success(), "{}", stderr(&o));

    ok(psearch(&["prepare-data", "--dataset", "synthetic", "--out", p(&data), "--images", "6", "--seed", "3"]));
    assert!(data.join("train.jsonl").exists() && data.join("test.jsonl").exists());

    ok(psearch(&["train", "--data", p(&data), "--profile", "toy", "--max-steps", "2", "--out", p(&run)]));
    let ckpt = run.join("last.ckpt");
    assert!(ckpt.exists() && run.join("config.toml").exists());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let metrics = dir.path().join("metrics.jsonl");
    ok(psearch(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--boxes",
        "gt",
        "--all-instances",
        "--out",
        p(&metrics),
    ]));
    ok(psearch(&[
        "sweep",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--sizes",
        "2,all",
        "--out",
        p(&metrics),
    ]));
    let rows = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(rows.lines().count(), 3, "{rows}");

    let plots = dir.path().join("plots");
    ok(psearch(&["plot", "--metrics", p(&metrics), "--log", p(&run.join("train_log.jsonl")), "--out", p(&plots)]));
    assert!(plots.join("loss.svg").exists());
}
