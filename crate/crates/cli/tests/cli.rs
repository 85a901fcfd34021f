use std::path::Path;
use std::process::{Command, Output};

use caetf::data::{class_counts, DatasetDir};

fn caetf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caetf"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = caetf(args, cwd);
    assert!(out.status.success(), "caetf {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn synth_writes_the_requested_balance() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", "data", "--size", "64"], dir.path());
    let data = DatasetDir::open(&dir.path().join("data")).unwrap();
    assert_eq!(data.len(), 114);
    let labels = data.metas().unwrap().into_iter().map(|m| m.label);
    assert_eq!(class_counts(labels), (58, 56));
    assert!(dir.path().join("data.manifest.json").is_file());
}

#[test]
fn eval_on_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let out = caetf(&["eval", "--data", "empty"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:"), "{stderr}");
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(caetf(&["synth", "--bogus"], dir.path()).status.code(), Some(2));
}

#[test]
fn print_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["synth", "--cases", "20", "--print-config"], dir.path());
    let config: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(config.to_string().contains("20"));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn outputs_inside_the_data_directory_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", "data", "--cases", "4", "--balance", "2:2", "--size", "64"], dir.path());
    let out = caetf(&["encode", "--data", "data", "--checkpoint", "missing.ckpt", "--out", "data/seq.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lies inside input"));
    assert!(!dir.path().join("data/seq.json").exists());
}

#[test]
fn eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", "data", "--cases", "8", "--balance", "4:4", "--size", "64"], dir.path());
    let eval = |out: &str| {
        let args = [
            "eval", "--data", "data", "--model", "gap-fc", "--folds", "2", "--epochs", "2", "--finetune-epochs", "1",
            "--max-slices", "2", "--out", out,
        ];
        ok(&args, dir.path());
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let (a, b) = (eval("a.json"), eval("b.json"));
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(report.to_string().contains("gap-fc"));
}
