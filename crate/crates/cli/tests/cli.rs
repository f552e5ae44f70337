use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dualtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualtl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dualtl(args);
    assert!(
        out.status.success(),
        "dualtl {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Four short 4-ROI videos and their 60-frame maps.
fn corpus(root: &Path) -> (PathBuf, PathBuf) {
    let traces = root.join("corpus");
    let maps = root.join("maps");
    ok(&["synth", "--out", &s(&traces), "--n-videos", "4", "--seed", "3", "--duration-s", "3.5", "--n-rois", "4"]);
    ok(&["mstmap", "--traces", &s(&traces), "--out", &s(&maps), "--seg-len", "60"]);
    (traces, maps)
}

fn small_config(root: &Path, epochs: usize) -> PathBuf {
    let path = root.join(format!("config_{epochs}.json"));
    let body = format!(
        r#"{{"model": {{"dim": 16, "layers": 1, "heads": 2}}, "train": {{"epochs": {epochs}, "batch_size": 4, "seed": 9}}}}"#
    );
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(dualtl(&["baseline", "--traces", "x", "--method", "ica", "--out", "y"]).status.code(), Some(2));
    assert_eq!(dualtl(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(dualtl(&["synth"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualtl(&["mstmap", "--traces", &s(&dir.path().join("missing")), "--out", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn synth_manifest_matches_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    ok(&["synth", "--out", &s(&out), "--n-videos", "4", "--seed", "1", "--duration-s", "4"]);
    let manifest = json(&out.join("manifest.json"));
    let videos = manifest["videos"].as_array().unwrap();
    assert_eq!(videos.len(), 4);
    for v in videos {
        assert!(out.join(v["trace"].as_str().unwrap()).is_file());
        let sidecar = json(&out.join(v["sidecar"].as_str().unwrap()));
        assert_eq!(sidecar["gt_hr_bpm"], v["gt_hr_bpm"]);
        let hr = v["hr_bpm"].as_f64().unwrap();
        assert!((50.0..=140.0).contains(&hr));
    }
}

#[test]
fn mstmap_writes_binary_maps() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("c");
    let maps = dir.path().join("m");
    ok(&["synth", "--out", &s(&traces), "--n-videos", "1", "--duration-s", "10"]);
    ok(&["mstmap", "--traces", &s(&traces), "--out", &s(&maps)]);
    let manifest = json(&maps.join("segments.json"));
    let segments = manifest["segments"].as_array().unwrap();
    assert_eq!(segments.len(), 1);
    let bytes = fs::read(maps.join(segments[0]["file"].as_str().unwrap())).unwrap();
    assert_eq!(&bytes[..4], b"MSTM");
    let map = dualtl::io::decode_mstmap(&bytes).unwrap();
    assert_eq!(map.shape(), (63, 3, 300));
    assert!(map.normalized);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (traces, maps) = corpus(dir.path());
    let straight = dir.path().join("straight");
    let split = dir.path().join("split");
    ok(&["train", "--maps", &s(&maps), "--traces", &s(&traces), "--config", &s(&small_config(dir.path(), 4)), "--out", &s(&straight)]);
    ok(&["train", "--maps", &s(&maps), "--traces", &s(&traces), "--config", &s(&small_config(dir.path(), 2)), "--out", &s(&split)]);
    let log_half = fs::read_to_string(split.join("train_log.csv")).unwrap();
    assert_eq!(log_half.lines().count(), 3);
    let state = s(&split.join("state.dtls"));
    ok(&[
        "train", "--maps", &s(&maps), "--traces", &s(&traces), "--config", &s(&small_config(dir.path(), 4)), "--out", &s(&split),
        "--resume", &state,
    ]);
    for file in ["checkpoint.dtlc", "state.dtls", "train_log.csv"] {
        assert_eq!(fs::read(straight.join(file)).unwrap(), fs::read(split.join(file)).unwrap(), "{file}");
    }
    let log = fs::read_to_string(straight.join("train_log.csv")).unwrap();
    let steps: Vec<u64> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![4, 8, 12, 16]);
}

#[test]
fn eval_infer_and_selfcheck() {
    let dir = tempfile::tempdir().unwrap();
    let (traces, maps) = corpus(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--maps", &s(&maps), "--traces", &s(&traces), "--config", &s(&small_config(dir.path(), 1)), "--out", &s(&run)]);
    let ckpt = s(&run.join("checkpoint.dtlc"));

    let eval = dir.path().join("eval");
    ok(&["eval", "--checkpoint", &ckpt, "--maps", &s(&maps), "--traces", &s(&traces), "--out", &s(&eval)]);
    let report = json(&eval.join("report.json"));
    let keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    for key in ["mae", "rmse", "mer", "std", "r", "excluded_segments", "videos"] {
        assert!(keys.iter().any(|k| *k == key), "missing {key} in {keys:?}");
    }
    assert_eq!(report["videos"].as_array().unwrap().len(), 4);

    let signals = dir.path().join("signals");
    ok(&["infer", "--checkpoint", &ckpt, "--maps", &s(&maps), "--out", &s(&signals)]);
    assert_eq!(fs::read_dir(&signals).unwrap().count(), 16);

    let out = ok(&["selfcheck", "--checkpoint", &ckpt]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS checkpoint") && !stdout.contains("FAIL"), "{stdout}");

    let bytes = fs::read(&ckpt).unwrap();
    let broken = dir.path().join("broken.dtlc");
    fs::write(&broken, &bytes[..bytes.len() / 2]).unwrap();
    let out = dualtl(&["selfcheck", "--checkpoint", &s(&broken)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL checkpoint"));
}

#[test]
fn baseline_reports_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("c");
    let out = dir.path().join("b");
    ok(&["synth", "--out", &s(&traces), "--n-videos", "3", "--seed", "5", "--clean"]);
    ok(&["baseline", "--traces", &s(&traces), "--method", "all", "--out", &s(&out)]);
    for method in ["green", "chrom", "pos"] {
        let report = json(&out.join(method).join("report.json"));
        assert!(report["mae"].as_f64().unwrap() < 2.0, "{method}: {report}");
        assert_eq!(fs::read_dir(out.join(method)).unwrap().count(), 4);
    }
}
