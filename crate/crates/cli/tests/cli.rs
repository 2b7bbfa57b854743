//! The binary's exit codes and on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_grpo-forge"));
    cmd.env("GRPO_FORGE_LOG", "error");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn grpo-forge")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited by signal")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    write_named(dir, "config.json", extra)
}

fn write_named(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let body = format!(
        r#"{{"steps": 6, "batch_size": 4, "eval_count": 16, "eval_interval": 3,
            "task": {{"count": 16}}{extra}}}"#
    );
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let res = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["steps.csv", "metrics.csv", "summary.json", "manifest.json", "config.json", "checkpoints/step-6.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let steps = fs::read_to_string(out.join("steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 7);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["finished_at_unix"].is_u64());
    assert_eq!(manifest["command"], "train");
}

#[test]
fn repeated_training_differs_only_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#", "augmentation_enabled": true"#);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(d)])), 0);
    }
    let mut names: Vec<String> = Vec::new();
    collect(&a, &a, &mut names);
    assert!(names.len() >= 6);
    for n in names.iter().filter(|n| n.as_str() != "manifest.json") {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
    let id = |d: &Path| {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
        (m["run_id"].clone(), m["input_hash"].clone())
    };
    assert_eq!(id(&a), id(&b));
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) {
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
        }
    }
}

#[test]
fn resume_continues_a_stopped_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#", "checkpoint_interval": 2"#);
    let full = tmp.path().join("full");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&full)])), 0);

    let part = tmp.path().join("part");
    let short = tmp.path().join("short.json");
    fs::write(&short, fs::read_to_string(&cfg).unwrap().replace("\"steps\": 6", "\"steps\": 2")).unwrap();
    assert_eq!(code(&run(&["train", "--config", s(&short), "--out", s(&part)])), 0);
    let ckpt = part.join("checkpoints/step-2.ckpt");
    let res = run(&["train", "--config", s(&cfg), "--out", s(&part), "--resume", s(&ckpt)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["steps.csv", "metrics.csv", "summary.json", "checkpoints/step-6.ckpt"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_configs_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), r#", "algorithm": "sarsa""#);
    let res = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("reg-grpo") && err.contains("online-dpo"), "{err}");

    let cfg = write_config(tmp.path(), r#", "learning_rat": 0.1"#);
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&out)])), 2);
    let missing = tmp.path().join("nope.json");
    assert_eq!(code(&run(&["train", "--config", s(&missing), "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["train", "--config", s(&cfg)])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn divergence_exits_with_numeric_abort() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#", "hyperparams": {"learning_rate": 1e9}"#);
    let out = tmp.path().join("run");
    let res = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("abort_dump.json")).unwrap()).unwrap();
    assert!(dump.is_object());
}

#[test]
fn compare_writes_one_row_per_cell_and_one_curve_per_algorithm() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("cmp");
    let args = ["compare", "--config", s(&cfg), "--algorithms", "grpo,reg-grpo", "--seeds", "0,1,2", "--out", s(&out)];
    let res = run(&args);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("ok")));
    for svg in ["reward_curve.svg", "vanishing_ratio.svg"] {
        let body = fs::read_to_string(out.join(svg)).unwrap();
        assert_eq!(body.matches("<polyline").count(), 2, "{svg}");
    }
    let table = fs::read_to_string(out.join("metrics_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);

    let again = tmp.path().join("cmp2");
    let mut args2 = args;
    args2[8] = s(&again);
    assert_eq!(code(&run(&args2)), 0);
    assert_eq!(csv.replace(s(&out), ""), fs::read_to_string(again.join("comparison.csv")).unwrap().replace(s(&again), ""));

    let single = run(&["compare", "--config", s(&cfg), "--algorithms", "grpo,grpo", "--out", s(&out)]);
    assert_eq!(code(&single), 2);
}

#[test]
fn gradcheck_exit_codes() {
    let ok = run(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let table = String::from_utf8_lossy(&ok.stdout);
    assert!(table.contains("reg-grpo") && table.contains("rebel"));

    let bad = run(&["gradcheck", "--trials", "5", "--corrupt", "grpo"]);
    assert_eq!(code(&bad), 1);
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("grpo") && err.contains("instance seed"), "{err}");

    assert_eq!(code(&run(&["gradcheck", "--trials", "0"])), 2);
}

#[test]
fn oracle_check_and_negative_control() {
    let ok = run(&["oracle-check"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let bad = run(&["oracle-check", "--negative-control"]);
    assert_eq!(code(&bad), 1);
    let err = String::from_utf8_lossy(&bad.stderr);
    let json = &err[err.find('[').unwrap()..];
    let rows: serde_json::Value = serde_json::from_str(json.trim()).unwrap();
    assert!(!rows.as_array().unwrap().is_empty());
}

#[test]
fn report_renders_plots_for_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
    let res = run(&["report", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let reward = fs::read_to_string(out.join("reward_curve.svg")).unwrap();
    assert!(reward.starts_with("<svg") && reward.contains("viewBox=\"0 0 640 400\""));
    let vanishing = fs::read_to_string(out.join("vanishing_ratio.svg")).unwrap();
    // Axis ticks of the ratio plot are pinned to the unit interval.
    assert!(vanishing.contains(">0<") || vanishing.contains(">0.00<"), "{vanishing}");
    assert!(vanishing.contains(">1<") || vanishing.contains(">1.00<"));
    assert!(out.join("metrics_table.csv").exists());

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&run(&["report", s(&empty)])), 2);
}

#[test]
fn dataset_export_is_jsonl() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("data/eval.jsonl");
    assert_eq!(code(&run(&["dataset", "--config", s(&cfg), "--out", s(&out), "--split", "eval"])), 0);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 16);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.is_object());
    }
}
