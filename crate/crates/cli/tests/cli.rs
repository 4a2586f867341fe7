use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparse-reid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn sparse-reid")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_commands() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("ds");
    let runs = root.path().join("runs");
    let synth = ok(&["gen-synth", "-o", s(&data), "--identities", "10", "--images-per-id", "4", "--train-identities", "6", "--occluders", "4"]);
    assert!(synth.starts_with("wrote 40 images"), "{synth}");

    let common = [format!("data_dir={}", s(&data)), format!("out_dir={}", s(&runs)), "epochs=1".into(), "ids_per_batch=2".into()];
    let common: Vec<&str> = common.iter().map(String::as_str).collect();

    let denied = run(&[&["--sequential", "train"], &common[..]].concat());
    assert!(!denied.status.success());
    assert!(String::from_utf8_lossy(&denied.stderr).contains("train --teacher"));

    ok(&[&["train", "--teacher"], &common[..]].concat());
    ok(&[&["train"], &common[..]].concat());
    let student = runs.join("student.ckpt");
    assert!(runs.join("teacher.ckpt").exists() && student.exists());

    let eval = ok(&["eval", s(&student), "--data", s(&data), "--csv"]);
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("rank1,"));
    let row: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert!((0.0..=1.0).contains(&row[0]) && (0.0..=1.0).contains(&row[4]));
    assert_eq!(row[8], 0.7);
    let occluded = ok(&["eval", s(&student), "--data", s(&data), "--occluded", "--keep-ratio", "0.5", "--csv"]);
    assert!(occluded.lines().nth(1).unwrap().split(',').nth(8) == Some("0.5"));

    let vis = root.path().join("vis");
    let img = data.join(&std::fs::read_to_string(data.join("manifest.csv")).unwrap().lines().nth(1).unwrap().split(',').next().unwrap());
    let shown = ok(&["visualize", s(&student), "-o", s(&vis), s(&img)]);
    assert_eq!(shown.lines().count(), 2);
    assert!(shown.contains("discarded="));
    assert_eq!(std::fs::read_dir(&vis).unwrap().count(), 2);

    let csv = root.path().join("bench.csv");
    let bench = ok(&["bench", "--checkpoint", s(&student), "--ratios", "0.5,1.0", "--batch", "4", "--reps", "5", "--out", s(&csv)]);
    assert_eq!(bench.lines().count(), 3);
    ok(&["--sequential", "bench", "--checkpoint", s(&student), "--ratios", "0.7", "--batch", "2", "--reps", "5", "--out", s(&csv)]);
    let written = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(written.lines().filter(|l| l.starts_with("p,")).count(), 1);
    assert_eq!(written.lines().count(), 4);
}

#[test]
fn bad_input_fails_cleanly() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nope.ckpt");
    let out = run(&["eval", s(&missing), "--data", s(root.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = run(&["train", "keep_ratio=2"]);
    assert!(!out.status.success());
    let out = run(&["train", "no_such_key=1"]);
    assert!(!out.status.success());
}
