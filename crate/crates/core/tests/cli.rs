use std::fs;
use std::path::Path;

use capsdense::cli;
use capsdense::model::{InputShape, ModelSpec};

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("capsdense").chain(args.iter().copied()))
}

fn write_spec(dir: &Path) -> String {
    let spec = ModelSpec::tiny_dcnet(InputShape::new(1, 16, 16), 4, 3, 8, 8);
    let path = dir.join("spec.json");
    fs::write(&path, spec.to_json().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn train(dir: &Path, out: &str, epochs: &str) -> i32 {
    let spec = write_spec(dir);
    let out = dir.join(out);
    run(&[
        "train", "--model", &spec, "--epochs", epochs, "--batch-size", "16", "--train-samples", "96",
        "--test-samples", "32", "--seed", "3", "--out", out.to_str().unwrap(),
    ])
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn train_writes_metrics_checkpoint_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train(dir.path(), "run", "2"), 0);
    let run_dir = dir.path().join("run");
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), capsdense::train::CSV_HEADER);
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][0], "1");
    assert!(run_dir.join("checkpoint.cdck").exists());
    assert!(run_dir.join("checkpoint.cdck.json").exists());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs_completed"], 2);

    // Resuming appends epoch 2 to the same log.
    let ck = run_dir.join("checkpoint.cdck");
    let code = run(&[
        "train", "--checkpoint", ck.to_str().unwrap(), "--epochs", "1", "--batch-size", "16",
        "--train-samples", "96", "--test-samples", "32", "--seed", "3", "--out", run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let rows = data_rows(&fs::read_to_string(run_dir.join("metrics.csv")).unwrap());
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][0], "2");
}

#[test]
fn eval_matches_final_test_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train(dir.path(), "run", "1"), 0);
    let run_dir = dir.path().join("run");
    let rows = data_rows(&fs::read_to_string(run_dir.join("metrics.csv")).unwrap());
    let logged: f64 = rows[0][6].parse().unwrap();
    let ck = run_dir.join("checkpoint.cdck");
    let report = capsdense::checkpoint::load_with_spec(&ck).unwrap();
    let model = capsdense::model::Model {
        spec: report.0,
        params: report.1.params,
    };
    let (_, test) = cli::synth_split(96, 32, 3);
    let r = capsdense::train::evaluate(&model, &test, 16, None).unwrap();
    assert_eq!(r.accuracy, logged);
    let code = run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--train-samples", "96", "--test-samples", "32", "--seed", "3", "--json"]);
    assert_eq!(code, 0);
}

#[test]
fn params_and_usage_exit_codes() {
    assert_eq!(run(&["params", "--preset", "baseline-capsnet"]), 0);
    assert_eq!(run(&["params", "--preset", "no-such-model"]), 1);
    assert_eq!(run(&["params"]), 1);
    assert_eq!(run(&["bogus"]), 1);
    assert_eq!(run(&["--help"]), 0);
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    fs::write(&spec, "{ not json").unwrap();
    assert_eq!(run(&["params", "--model", spec.to_str().unwrap()]), 1);
}

#[test]
fn corrupt_checkpoint_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train(dir.path(), "run", "1"), 0);
    let ck = dir.path().join("run/checkpoint.cdck");
    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ck, bytes).unwrap();
    assert_eq!(run(&["eval", "--checkpoint", ck.to_str().unwrap()]), 2);
    assert_eq!(run(&["eval", "--checkpoint", "/nonexistent/x.cdck"]), 2);
}

#[test]
fn gradcheck_exit_codes() {
    assert_eq!(run(&["gradcheck", "--scale", "ops"]), 0);
    assert_eq!(run(&["gradcheck", "--scale", "model"]), 0);
    assert_eq!(run(&["gradcheck", "--scale", "model", "--fault", "leaky-relu"]), 3);
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).to_string();
    let mut fields = text.split_ascii_whitespace();
    assert_eq!(fields.next(), Some("P5"));
    let w: usize = fields.next().unwrap().parse().unwrap();
    let h: usize = fields.next().unwrap().parse().unwrap();
    assert_eq!(fields.next(), Some("255"));
    let header = format!("P5\n{w} {h}\n255\n").len();
    assert_eq!(bytes.len(), header + w * h);
    (w, h, bytes[header..].to_vec())
}

#[test]
fn perturb_emits_one_image_per_dimension_plus_baseline() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train(dir.path(), "run", "1"), 0);
    let ck = dir.path().join("run/checkpoint.cdck");
    for (delta, out) in [("-0.2", "p"), ("0", "zero")] {
        let out = dir.path().join(out);
        let code = run(&[
            "perturb", "--checkpoint", ck.to_str().unwrap(), "--test-samples", "32", "--seed", "3", "--delta", delta,
            "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    let dims = 4;
    let pgms = |d: &str| {
        let mut v: Vec<_> = fs::read_dir(dir.path().join(d))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        v.sort();
        v
    };
    let files = pgms("p");
    assert_eq!(files.len(), dims + 1);
    for f in &files {
        assert_eq!(read_pgm(f).0, 16);
    }
    let index: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("p/index.json")).unwrap()).unwrap();
    assert_eq!(index["files"].as_array().unwrap().len(), dims + 1);

    let zero = pgms("zero");
    let base = fs::read(dir.path().join("zero/baseline.pgm")).unwrap();
    for f in &zero {
        assert_eq!(fs::read(f).unwrap(), base, "{}", f.display());
    }
}

#[test]
fn binary_reports_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_capsdense");
    let out = std::process::Command::new(exe).args(["params", "--preset", "dcnet", "--json"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["total"], 12_671_248);
    let status = std::process::Command::new(exe).args(["params", "--preset", "nope"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
}
