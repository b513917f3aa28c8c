use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circuitscope")).args(args).env("CIRCUITSCOPE_THREADS", "1").output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path) -> PathBuf {
    let config = fixture("tiny_config.json");
    ok(&["train-base", "--config", s(&config), "--out", s(dir)]);
    dir.join("model.npck")
}

#[test]
fn discover_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixture("tiny_config.json");
    let model = train(&tmp.path().join("base"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&["discover", "--config", s(&config), "--model", s(&model), "--out", s(dir)]);
    }
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "masks.npck"), read(&b, "masks.npck"));
    assert_eq!(read(&a, "train_log.jsonl"), read(&b, "train_log.jsonl"));

    let manifest: serde_json::Value = serde_json::from_slice(&read(&a, "manifest.json")).unwrap();
    let other: serde_json::Value = serde_json::from_slice(&read(&b, "manifest.json")).unwrap();
    assert_eq!(manifest["input_hash"], other["input_hash"]);
    assert_eq!(manifest["command"], "discover");
}

#[test]
fn different_seeds_give_different_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixture("tiny_config.json");
    let model = train(&tmp.path().join("base"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["discover", "--config", s(&config), "--model", s(&model), "--out", s(&a)]);
    ok(&["discover", "--config", s(&config), "--model", s(&model), "--seed", "8", "--out", s(&b)]);
    assert_ne!(std::fs::read(a.join("masks.npck")).unwrap(), std::fs::read(b.join("masks.npck")).unwrap());
}

#[test]
fn full_pipeline_and_full_circuit_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixture("tiny_config.json");
    let model = train(&tmp.path().join("base"));
    let masks_dir = tmp.path().join("masks");
    ok(&["discover", "--config", s(&config), "--model", s(&model), "--out", s(&masks_dir)]);
    let circuit_dir = tmp.path().join("circuit");
    ok(&["extract", "--config", s(&config), "--masks", s(&masks_dir.join("masks.npck")), "--out", s(&circuit_dir)]);
    let eval_dir = tmp.path().join("eval");
    let circuit = circuit_dir.join("circuit_mask.json");
    ok(&["evaluate", "--config", s(&config), "--model", s(&model), "--circuit", s(&circuit), "--out", s(&eval_dir)]);

    // a few mask epochs barely move gates initialised well above threshold
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["circuit"]["kl_divergence"].as_f64(), Some(0.0));
    assert_eq!(metrics["base"], metrics["circuit"]);

    let report_dir = tmp.path().join("report");
    ok(&[
        "report",
        "--config",
        s(&config),
        "--circuit",
        s(&circuit),
        "--metrics",
        s(&eval_dir.join("metrics.json")),
        "--out",
        s(&report_dir),
    ]);
    for f in ["circuit.json", "circuit.md", "circuit.csv", "manifest.json"] {
        assert!(report_dir.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(report_dir.join("circuit.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("layer,family,active,total,sparsity"));
    assert_eq!(csv.lines().count(), 1 + 2 * 6);

    let oracle_dir = tmp.path().join("oracle");
    ok(&["oracle", "--config", s(&config), "--model", s(&model), "--epsilon", "0.05", "--out", s(&oracle_dir)]);
    let oracle: serde_json::Value = serde_json::from_slice(&std::fs::read(oracle_dir.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(oracle["node_set"].as_array().unwrap().len(), 8);
}

#[test]
fn discover_without_model_trains_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixture("tiny_config.json");
    ok(&["discover", "--config", s(&config), "--out", s(tmp.path())]);
    assert!(tmp.path().join("model.npck").is_file());
    assert!(tmp.path().join("masks.npck").is_file());
}

#[test]
fn markdown_report_matches_golden() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&[
        "report",
        "--config",
        s(&fixture("tiny_config.json")),
        "--circuit",
        s(&fixture("circuit_mask.json")),
        "--metrics",
        s(&fixture("metrics.json")),
        "--format",
        "markdown",
        "--out",
        s(tmp.path()),
    ]);
    let got = std::fs::read_to_string(tmp.path().join("circuit.md")).unwrap();
    let want = std::fs::read_to_string(fixture("circuit_golden.md"))
        .unwrap()
        .replace("Tool version 0.1.0.", &format!("Tool version {}.", env!("CARGO_PKG_VERSION")));
    assert_eq!(got, want);
    assert!(!tmp.path().join("circuit.csv").exists());
}

#[test]
fn bad_config_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"task": "gt", "model": {"n_layers": 1}}"#).unwrap();
    let out = run(&["train-base", "--config", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    // validation runs before any output is produced
    let mut config: serde_json::Value = serde_json::from_slice(&std::fs::read(fixture("tiny_config.json")).unwrap()).unwrap();
    config["model"]["n_heads"] = 3.into();
    std::fs::write(&bad, config.to_string()).unwrap();
    let out = run(&["train-base", "--config", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn missing_input_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "extract",
        "--config",
        s(&fixture("tiny_config.json")),
        "--masks",
        s(&tmp.path().join("nope.npck")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    // output directory path is an existing regular file
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = run(&["train-base", "--config", s(&fixture("tiny_config.json")), "--out", s(&blocker)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn refuses_to_overwrite_an_input() {
    let tmp = tempfile::tempdir().unwrap();
    let model = train(&tmp.path().join("base"));
    let out_dir = tmp.path().join("eval");
    std::fs::create_dir(&out_dir).unwrap();
    // a circuit file stored under the name evaluate writes to
    let circuit = out_dir.join("metrics.json");
    let original = std::fs::read(fixture("circuit_mask.json")).unwrap();
    std::fs::write(&circuit, &original).unwrap();
    let config = fixture("tiny_config.json");
    let out = run(&["evaluate", "--config", s(&config), "--model", s(&model), "--circuit", s(&circuit), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("overwrite"));
    assert_eq!(std::fs::read(&circuit).unwrap(), original);
}
