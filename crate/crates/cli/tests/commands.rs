use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sleepfuse::data::container::read_preprocessed;
use sleepfuse::data::{write_container, ContainerRecording};
use sleepfuse::model::{KindSet, SignalKind};
use sleepfuse::train::{lr_at, TrainConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sleepfuse"))
        .args(args)
        .env_remove("SLEEPFUSE_OUT_DIR")
        .env("SLEEPFUSE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_tiny(dir: &Path, seed: &str, preprocess: bool) -> PathBuf {
    let mut args = vec!["synth", "--preset", "tiny", "--seed", seed, "--out", s(dir)];
    if preprocess {
        args.push("--preprocess");
    }
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("manifest.json")
}

fn train_tiny(manifest: &Path, out_dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--preset",
        "tiny",
        "--manifest",
        s(manifest),
        "--out",
        s(out_dir),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn log_lines(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_deterministic_and_splits_by_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_tiny(&a, "5", false);
    synth_tiny(&b, "5", false);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let manifest: Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let splits: Vec<&str> = manifest["recordings"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["split"].as_str().unwrap())
        .collect();
    assert_eq!(splits.len(), 10);
    let count = |name| splits.iter().filter(|s| **s == name).count();
    assert_eq!((count("train"), count("validation"), count("test")), (8, 1, 1));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    let matrix =
        r#"{"data": {"synth": {"transition": [[0,1,0,0,0],[1,0,0,0,0],[0,0,0,1,0],[0,0,1,0,0],[0.5,0.5,0.5,0,0]]}}}"#;
    std::fs::write(&cfg, matrix).unwrap();
    let out = run(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));

    std::fs::write(&cfg, r#"{"train": {"max_lrr": 0.1}}"#).unwrap();
    let out = run(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("max_lrr"), "{}", stderr(&out));
}

#[test]
fn unwritable_output_fails_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("occupied");
    std::fs::write(&file, "x").unwrap();
    let out = run(&["synth", "--preset", "tiny", "--out", s(&file.join("sub"))]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("occupied"), "{}", stderr(&out));
}

#[test]
fn preprocess_produces_grid_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = synth_tiny(&tmp.path().join("raw"), "2", false);
    let once = tmp.path().join("once");
    let out = run(&[
        "preprocess",
        "--preset",
        "tiny",
        "--manifest",
        s(&raw),
        "--out",
        s(&once),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!stderr(&out).contains("already preprocessed"));

    let model = sleepfuse::config::RunConfig::preset("tiny").unwrap().model;
    let rec = read_preprocessed(&once.join("synth-000002.slpf")).unwrap();
    assert_eq!(rec.epochs(), model.epochs);
    for kind in SignalKind::ALL {
        assert_eq!(rec.signal(kind).unwrap().len(), model.k(kind) * model.epochs);
    }

    let twice = tmp.path().join("twice");
    let again = once.join("manifest.json");
    let out = run(&[
        "preprocess",
        "--preset",
        "tiny",
        "--manifest",
        s(&again),
        "--out",
        s(&twice),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("already preprocessed"));
    assert_eq!(dir_bytes(&once), dir_bytes(&twice));
}

#[test]
fn preprocess_names_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_tiny(&tmp.path().join("raw"), "3", false);
    std::fs::remove_file(tmp.path().join("raw/synth-000004.slpf")).unwrap();
    let out = run(&[
        "preprocess",
        "--preset",
        "tiny",
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("p")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("synth-000004.slpf"), "{}", stderr(&out));
}

#[test]
fn train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_tiny(&tmp.path().join("data"), "7", true);
    let run_dir = tmp.path().join("run");
    let out = train_tiny(&manifest, &run_dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["best.ckpt", "last.ckpt", "train_log.jsonl"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    assert!(log_lines(&run_dir).iter().any(|l| l["val_loss"].is_number()));
    let ckpt = run_dir.join("best.ckpt");

    let report_path = tmp.path().join("ecg.json");
    let svg = tmp.path().join("cm.svg");
    let out = run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--modalities",
        "ECG",
        "--out",
        s(&report_path),
        "--svg",
        s(&svg),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report["subset"], serde_json::json!(["ECG"]));
    assert_eq!(report["n_recordings"], 1);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let out = run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--modalities",
        "EEG",
    ]);
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("ECG, PPG, ABD, THX") || stderr(&out).contains("ECG,PPG,ABD,THX"),
        "{}",
        stderr(&out)
    );

    let container = tmp.path().join("data/synth-000007.slpf");
    let out = run(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&container),
        "--modalities",
        "ECG,THX",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut reader = csv::Reader::from_reader(out.stdout.as_slice());
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["epoch", "stage", "p_wake", "p_light", "p_deep", "p_rem"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    for row in &rows {
        let total: f64 = (2..6).map(|i| row[i].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() <= 1e-6, "row sums to {total}");
    }

    let mut partial = read_preprocessed(&container).unwrap();
    partial.retain(KindSet::parse_list("ECG,ABD").unwrap());
    let partial_path = tmp.path().join("partial.slpf");
    write_container(&partial_path, &ContainerRecording::Preprocessed(partial)).unwrap();
    let out = run(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&partial_path),
        "--modalities",
        "PPG",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("available: ECG,ABD"), "{}", stderr(&out));
}

#[test]
fn init_from_resumes_schedule_only_when_asked() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_tiny(&tmp.path().join("data"), "9", true);
    let base = tmp.path().join("base");
    assert_eq!(code(&train_tiny(&manifest, &base, &[])), 0);
    let stored_step = log_lines(&base).last().unwrap()["step"].as_u64().unwrap();
    let ckpt = base.join("last.ckpt");
    let train = sleepfuse::config::RunConfig::preset("tiny").unwrap().train;
    let first_lr = |dir: &Path| log_lines(dir)[0]["lr"].as_f64().unwrap();
    let expect = |step: u64, c: &TrainConfig| lr_at(step, c);

    let resumed = tmp.path().join("resumed");
    let out = train_tiny(&manifest, &resumed, &["--init-from", s(&ckpt), "--resume-schedule"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(log_lines(&resumed)[0]["step"].as_u64().unwrap(), stored_step + 1);
    assert_eq!(first_lr(&resumed), expect(stored_step + 1, &train));

    let fresh = tmp.path().join("fresh");
    assert_eq!(code(&train_tiny(&manifest, &fresh, &["--init-from", s(&ckpt)])), 0);
    assert_eq!(first_lr(&fresh), expect(1, &train));
}

#[test]
fn resume_schedule_requires_init_from() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_tiny(
        &tmp.path().join("m.json"),
        &tmp.path().join("o"),
        &["--resume-schedule"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--init-from"), "{}", stderr(&out));
}

#[test]
fn training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_tiny(&tmp.path().join("data"), "11", true);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&train_tiny(&manifest, &a, &["--seed", "4"])), 0);
    assert_eq!(code(&train_tiny(&manifest, &b, &["--seed", "4"])), 0);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let out = run(&["gradcheck", "--trials", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));

    let out = run(&[
        "gradcheck",
        "--trials",
        "3",
        "--filter",
        "gelu",
        "--inject-fault",
        "gelu",
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
