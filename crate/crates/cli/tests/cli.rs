use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn chexopt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chexopt"))
        .current_dir(dir)
        .arg("-q")
        .args(args)
        .env("CHEXOPT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = chexopt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const TINY: &str = r#"{"data": {"image_size": 32}, "train": {"epochs": 1, "batch_size": 8}}"#;

/// Generates, balances and splits a small dataset; returns the split manifest path.
fn prepared(dir: &Path, per_class: &str) -> PathBuf {
    fs::write(dir.join("tiny.json"), TINY).unwrap();
    ok(dir, &["--config", "tiny.json", "generate-data", "--per-class", per_class, "--out-dir", "data"]);
    ok(dir, &["split", "--manifest", "data/manifest.json"]);
    dir.join("data/split.json")
}

fn sha_line(stdout: &str) -> String {
    stdout.lines().find(|l| l.contains("sha256")).unwrap().split_whitespace().last().unwrap().to_string()
}

#[test]
fn generate_writes_images_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["generate-data", "--per-class", "10", "--image-size", "32", "--out-dir", "data"];
    let first = ok(a.path(), &args);
    let second = ok(b.path(), &args);
    let pgms = walk(&a.path().join("data/images")).into_iter().filter(|p| p.extension().is_some_and(|e| e == "pgm")).count();
    assert_eq!(pgms, 50);
    assert_eq!(sha_line(&first), sha_line(&second));
    assert_eq!(
        fs::read(a.path().join("data/images/normal/normal-00003.pgm")).unwrap(),
        fs::read(b.path().join("data/images/normal/normal-00003.pgm")).unwrap()
    );
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn balance_with_a_missing_class_names_it() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["generate-data", "--counts", "4,4,6,4,0", "--image-size", "32", "--out-dir", "data"]);
    let out = chexopt(d, &["balance", "--manifest", "data/manifest.json", "--target", "4"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Tuberculosis"));
}

#[test]
fn balance_at_one_tenth_scale() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["generate-data", "--counts", "274,362,6036,139,249", "--image-size", "32", "--out-dir", "data"]);
    let report = ok(d, &["balance", "--manifest", "data/manifest.json", "--target", "362"]);
    assert!(report.contains("1810"), "{report}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("data/balanced.json")).unwrap()).unwrap();
    assert_eq!(manifest["records"].as_array().unwrap().len(), 1810);
    let again = ok(d, &["balance", "--manifest", "data/balanced.json", "--out", "data/again.json"]);
    assert!(again.contains("already balanced"), "{again}");
}

#[test]
fn derived_manifest_must_stay_beside_its_images() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["generate-data", "--per-class", "4", "--image-size", "32", "--out-dir", "data"]);
    fs::create_dir(d.join("elsewhere")).unwrap();
    let out = chexopt(d, &["split", "--manifest", "data/manifest.json", "--out", "elsewhere/split.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_evaluate_report_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let split = prepared(d, "10");
    let split = split.to_str().unwrap();
    ok(d, &["--preset", "desk", "--config", "tiny.json", "train", "--manifest", split, "--out-dir", "runs", "--seeds", "0"]);
    let run = d.join("runs/proposed/seed_0");
    let ckpts = fs::read_dir(run.join("checkpoints")).unwrap().count();
    assert_eq!(ckpts, 1);
    assert!(run.join("summary.json").is_file());

    let ckpt = run.join("checkpoints/epoch_001.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    ok(d, &["evaluate", "--checkpoint", ckpt, "--manifest", split, "--out-dir", "e1"]);
    ok(d, &["evaluate", "--checkpoint", ckpt, "--manifest", split, "--out-dir", "e2"]);
    for f in ["confusion_matrix.txt", "per_class.csv", "metrics.json", "predictions.csv"] {
        assert_eq!(fs::read(d.join("e1").join(f)).unwrap(), fs::read(d.join("e2").join(f)).unwrap(), "{f}");
    }
    let wrong = chexopt(d, &["evaluate", "--profile", "full-table4", "--checkpoint", ckpt, "--manifest", split, "--out-dir", "e3"]);
    assert_eq!(code(&wrong), 2);

    let report = ok(d, &["report", "--run-dir", "runs/proposed/seed_0"]);
    assert!(report.contains("## Test metrics"));
    assert!(run.join("report.md").is_file());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let split = prepared(d, "6");
    let split = split.to_str().unwrap();
    let base = ["--preset", "desk", "--config", "tiny.json", "train", "--manifest", split, "--epochs", "2", "--seeds", "0"];
    ok(d, &[&base[..], &["--out-dir", "full"]].concat());
    ok(d, &[&base[..], &["--out-dir", "parts", "--stop-after", "1"]].concat());
    ok(d, &[&base[..], &["--out-dir", "parts", "--resume"]].concat());
    let full = d.join("full/proposed/seed_0");
    let parts = d.join("parts/proposed/seed_0");
    assert_eq!(fs::read_to_string(full.join("metrics.csv")).unwrap().lines().count(), 3);
    let mut files = vec!["metrics.csv".to_string(), "lr_trace.csv".into(), "confusion_matrix.txt".into(), "summary.json".into()];
    for e in fs::read_dir(full.join("checkpoints")).unwrap() {
        files.push(format!("checkpoints/{}", e.unwrap().file_name().to_string_lossy()));
    }
    for f in files {
        assert_eq!(fs::read(full.join(&f)).unwrap(), fs::read(parts.join(&f)).unwrap(), "{f}");
    }
}

/// Summary whose four test metrics all move with `v`.
fn fake_summary(template: &serde_json::Value, seed: u64, v: f64) -> serde_json::Value {
    let mut s = template.clone();
    s["seed"] = seed.into();
    s["test"]["accuracy"] = v.into();
    s["test"]["precision"] = (v - 0.01).into();
    s["test"]["recall"] = (v + 0.005).into();
    s["test"]["f1"] = (v - 0.02).into();
    s
}

fn write_arm(dir: &Path, runs: &[serde_json::Value]) {
    for (i, s) in runs.iter().enumerate() {
        let run = dir.join(format!("seed_{i}"));
        fs::create_dir_all(&run).unwrap();
        fs::write(run.join("summary.json"), serde_json::to_string(s).unwrap()).unwrap();
    }
}

#[test]
fn compare_checks_pairing_and_degeneracy() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let split = prepared(d, "10");
    let split = split.to_str().unwrap();
    ok(d, &["--preset", "desk", "--config", "tiny.json", "train", "--manifest", split, "--out-dir", "runs", "--seeds", "0"]);
    let template: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("runs/proposed/seed_0/summary.json")).unwrap()).unwrap();

    write_arm(&d.join("b"), &[fake_summary(&template, 0, 0.90), fake_summary(&template, 1, 0.92), fake_summary(&template, 2, 0.91)]);
    write_arm(&d.join("p"), &[fake_summary(&template, 0, 0.93), fake_summary(&template, 1, 0.94), fake_summary(&template, 2, 0.96)]);
    let fwd = ok(d, &["compare", "--baseline", "b", "--proposed", "p", "--out-dir", "c1", "--bootstrap-iterations", "500"]);
    let rev = ok(d, &["compare", "--baseline", "p", "--proposed", "b", "--out-dir", "c2", "--bootstrap-iterations", "500"]);
    assert!(d.join("c1/comparison.md").is_file());
    let delta = |text: &str| -> f64 {
        let row = text.lines().find(|l| l.starts_with("| Accuracy")).unwrap();
        let cells: Vec<&str> = row.split('|').map(str::trim).collect();
        cells[4].parse().unwrap()
    };
    assert!(delta(&fwd) > 0.0);
    assert_eq!(delta(&fwd), -delta(&rev));

    let single = chexopt(d, &["compare", "--baseline", "b/seed_0", "--proposed", "p", "--out-dir", "c3"]);
    assert_eq!(code(&single), 2);
    assert!(String::from_utf8_lossy(&single.stderr).contains("n ≥ 2"));

    write_arm(&d.join("flat"), &[fake_summary(&template, 0, 0.90), fake_summary(&template, 1, 0.92), fake_summary(&template, 2, 0.91)]);
    write_arm(&d.join("shifted"), &[fake_summary(&template, 0, 0.91), fake_summary(&template, 1, 0.93), fake_summary(&template, 2, 0.92)]);
    let degenerate = chexopt(d, &["compare", "--baseline", "flat", "--proposed", "shifted", "--out-dir", "c4"]);
    assert_eq!(code(&degenerate), 4, "{}", String::from_utf8_lossy(&degenerate.stderr));
}

#[test]
fn config_errors_have_distinct_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fs::write(d.join("bad.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    let unknown = chexopt(d, &["--config", "bad.json", "report", "--run-dir", "."]);
    assert_eq!(code(&unknown), 2);
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("epoch"));
    let missing = chexopt(d, &["--config", "absent.json", "report", "--run-dir", "."]);
    assert_eq!(code(&missing), 3);
    let no_summary = chexopt(d, &["report", "--run-dir", "."]);
    assert_eq!(code(&no_summary), 3);
}
