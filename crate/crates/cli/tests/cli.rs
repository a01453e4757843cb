use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use idc_core::data::{materialize, CorpusManifest, Split};
use idc_core::model::load_checkpoint;

fn idc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idc")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// A feature-mode run directory: feature CSV plus config.
fn feature_run(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let csv = dir.join("features.csv");
    if !csv.exists() {
        let out = idc(&["synth", "--out", csv.to_str().unwrap(), "--per-class", "120", "--features", "8"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let run = dir.join(name);
    let config = format!(
        r#"seed = {seed}
data_dir = "{run}"

[data]
n_per_class = 100
[data.source]
kind = "feature_file"
path = "{csv}"

[model.backbone]
kind = "feature_file"
dim = 8

[train]
epochs = 4
batch_size = 16

[experiment]
groups = 2
n_fp = 3
n_fn = 3
[experiment.train]
epochs = 2
batch_size = 16
"#,
        run = run.display(),
        csv = csv.display()
    );
    std::fs::create_dir_all(&run).unwrap();
    let path = run.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}

fn ok(args: &[&str]) -> String {
    let out = idc(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&idc(&[])), 2);
    assert_eq!(code(&idc(&["train", "--bogus"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    assert_eq!(code(&idc(&["--config", bad.to_str().unwrap(), "prepare"])), 2);
    let out = idc(&["--data-dir", dir.path().to_str().unwrap(), "train"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("idc prepare"));
}

#[test]
fn pipeline_end_to_end_and_hand_scored_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = feature_run(dir.path(), "run", 5);
    let cfg = cfg.to_str().unwrap();
    let table = ok(&["--config", cfg, "prepare"]);
    assert!(table.contains("balanced"), "{table}");
    ok(&["--config", cfg, "train"]);
    let run = dir.path().join("run");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 4);
    ok(&["--config", cfg, "evaluate"]);

    // Score the checkpoint independently of the evaluate command.
    let (model, _) = load_checkpoint(&run.join("model.idcm")).unwrap();
    let manifest = CorpusManifest::load(&run.join("manifest.json")).unwrap();
    let test = materialize(&manifest, Split::Test).unwrap();
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..test.len() {
        let sample = idc_core::Tensor::new(test.sample_shape.clone(), test.sample(i).to_vec()).unwrap();
        let pred = model.predict(&sample).unwrap().label;
        match (pred, test.labels[i]) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let cm = &metrics["confusion"];
    assert_eq!((cm["tp"].as_u64(), cm["fp"].as_u64(), cm["fn"].as_u64(), cm["tn"].as_u64()), (Some(tp), Some(fp), Some(fn_), Some(tn)));
    let acc = (tp + tn) as f64 / (tp + fp + fn_ + tn) as f64;
    assert!((metrics["accuracy"].as_f64().unwrap() - acc).abs() < 1e-12);

    let out = ok(&["--config", cfg, "experiment"]);
    assert!(out.contains("group 2"), "{out}");
    let csv = std::fs::read_to_string(run.join("experiment.csv")).unwrap();
    assert!(csv.starts_with("group,samples,correct_before,accuracy_before,correct_after,accuracy_after"));
    assert_eq!(csv.lines().count(), 3);
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1], "6");
        assert_eq!(cols[2], "0");
    }
}

#[test]
fn prepare_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = feature_run(dir.path(), "a", 3);
    let b = feature_run(dir.path(), "b", 3);
    ok(&["--config", a.to_str().unwrap(), "prepare"]);
    ok(&["--config", b.to_str().unwrap(), "prepare"]);
    let read = |n: &str| std::fs::read(dir.path().join(n).join("manifest.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    let c = feature_run(dir.path(), "c", 4);
    ok(&["--config", c.to_str().unwrap(), "prepare"]);
    assert_ne!(read("a"), read("c"));
}

#[test]
fn mismatched_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let a = feature_run(dir.path(), "a", 1);
    let b = feature_run(dir.path(), "b", 2);
    let a = a.to_str().unwrap();
    ok(&["--config", a, "prepare"]);
    ok(&["--config", a, "train"]);
    ok(&["--config", b.to_str().unwrap(), "prepare"]);
    let ckpt = dir.path().join("a/model.idcm");
    let other_manifest = dir.path().join("b/manifest.json");
    let out = idc(&[
        "--config",
        a,
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        other_manifest.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    assert_eq!(code(&idc(&["--config", a, "evaluate"])), 3);
}

#[test]
fn serve_answers_model_info() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = feature_run(dir.path(), "run", 8);
    let cfg = cfg.to_str().unwrap();
    ok(&["--config", cfg, "prepare"]);
    ok(&["--config", cfg, "train"]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_idc"))
        .args(["--config", cfg, "serve", "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("serve exited early").unwrap();
        if let Some(rest) = line.strip_prefix("serving on http://") {
            break rest.to_string();
        }
    };
    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /api/model HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"version\":\"v0001\""), "{response}");
}
