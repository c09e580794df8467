//! Command-line behaviour of the `creditscope` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn creditscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_creditscope"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = creditscope(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two noisy Gaussian-like blobs with integer labels, written as CSV.
fn write_blobs(path: &Path, rows: usize, seed: u64) {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut text = String::from("a,b,c,goodbad\n");
    for i in 0..rows {
        let y = i % 2;
        let shift = if y == 1 { 1.5 } else { 0.0 };
        let (a, b, c) = (next() + shift, next() - shift, next());
        text.push_str(&format!("{a},{b},{c},{y}\n"));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn generate_is_deterministic_and_writes_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    std::fs::write(&cfg, r#"{"n_rows": 200, "n_features": 40}"#).unwrap();
    let (a, b, truth) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("t.json"));
    ok(&["generate", "--out", p(&a), "--config", p(&cfg), "--seed", "3", "--truth", p(&truth)]);
    ok(&["generate", "--out", p(&b), "--config", p(&cfg), "--seed", "3"]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 201);
    let t: Value = serde_json::from_str(&std::fs::read_to_string(&truth).unwrap()).unwrap();
    assert!(t["signal_columns"].as_array().is_some_and(|s| !s.is_empty()));
}

#[test]
fn run_writes_a_report_for_a_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{
            "input": {"generator": {"n_rows": 500, "n_features": 40, "seed": 2}},
            "search": {"trials": 3, "max_depth": {"min": 1, "max": 6}, "n_estimators": {"min": 5, "max": 15}}
        }"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&["run", "--config", p(&cfg), "--mode", "risk", "--seed", "5", "--out-dir", p(&out)]);
    assert!(stdout.contains("profit="), "{stdout}");
    assert!(stdout.lines().last().unwrap().starts_with("best: "));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "risk");
    assert_eq!(report["master_seed"], 5);
    assert_eq!(report["classifiers"].as_array().unwrap().len(), 3);
}

#[test]
fn train_predict_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (dir.path().join("train.csv"), dir.path().join("test.csv"));
    write_blobs(&train, 300, 1);
    write_blobs(&test, 120, 2);
    let model = dir.path().join("model.json");
    ok(&[
        "train", "--input", p(&train), "--kind", "random_forest", "--n-estimators", "25", "--seed", "4", "--out",
        p(&model),
    ]);

    let proba = dir.path().join("proba.csv");
    ok(&["predict", "--model", p(&model), "--input", p(&test), "--out", p(&proba)]);
    let text = std::fs::read_to_string(&proba).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("p0,p1"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 120);
    assert!(rows.iter().all(|r| (r[0] + r[1] - 1.0).abs() < 1e-12));

    let roc = dir.path().join("roc.csv");
    let doc: Value = serde_json::from_str(&ok(&[
        "evaluate", "--model", p(&model), "--input", p(&test), "--roc", p(&roc),
    ]))
    .unwrap();
    let counts = &doc["confusion"]["counts"];
    let total: u64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| counts[i][j].as_u64().unwrap()).sum();
    assert_eq!(total, 120);
    assert!(doc["metrics"]["accuracy"].as_f64().unwrap() > 0.8);
    assert!(doc["auc"].as_f64().unwrap() > 0.85);
    assert!(roc.is_file());
}

#[test]
fn preprocess_and_select_features_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    std::fs::write(&cfg, r#"{"n_rows": 400, "n_features": 40}"#).unwrap();
    let data = dir.path().join("data.csv");
    ok(&["generate", "--out", p(&data), "--config", p(&cfg)]);
    let pre = dir.path().join("pre");
    ok(&["preprocess", "--input", p(&data), "--out-dir", p(&pre)]);
    assert!(pre.join("preprocess_model.json").is_file());
    let cleaned = pre.join("preprocessed.csv");
    ok(&["select-features", "--input", p(&cleaned), "--out-dir", p(&pre)]);
    let kept: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(pre.join("selected_features.json")).unwrap()).unwrap();
    assert!(!kept.is_empty());
    assert!(pre.join("vif_trace.csv").is_file());
}

#[test]
fn resample_balances_the_classes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("imb.csv");
    let mut text = String::from("a,b,goodbad\n");
    for i in 0..120 {
        let y = u8::from(i % 6 == 0);
        text.push_str(&format!("{},{},{y}\n", (i * 37 % 101) as f64 / 10.0 + f64::from(y) * 3.0, (i * 53 % 89) as f64 / 9.0));
    }
    std::fs::write(&data, text).unwrap();
    let (out, report) = (dir.path().join("res.csv"), dir.path().join("rep.json"));
    ok(&["resample", "--input", p(&data), "--out", p(&out), "--seed", "7", "--report", p(&report)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let ones = text.lines().skip(1).filter(|l| l.ends_with(",1")).count();
    let zeros = text.lines().skip(1).filter(|l| l.ends_with(",0")).count();
    assert_eq!(zeros, 100);
    assert_eq!(ones, 100);
}

#[test]
fn profit_of_the_default_payoff() {
    let dir = tempfile::tempdir().unwrap();
    let cm = dir.path().join("cm.json");
    std::fs::write(&cm, r#"{"classes": [0, 1], "counts": [[100, 0], [10, 0]]}"#).unwrap();
    let doc: Value = serde_json::from_str(&ok(&["profit", "--confusion", p(&cm)])).unwrap();
    assert_eq!(doc["cents"], 1_400_000);
    assert_eq!(doc["dollars"], "$14,000.00");

    let payoff = dir.path().join("pay.json");
    std::fs::write(&payoff, r#"{"cents": [[1, 2], [3, 4]]}"#).unwrap();
    let doc: Value = serde_json::from_str(&ok(&["profit", "--confusion", p(&cm), "--payoff", p(&payoff)])).unwrap();
    assert_eq!(doc["cents"], 130);
}

#[test]
fn failures_exit_nonzero_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = creditscope(&["run", "--input", p(&missing), "--out-dir", p(&dir.path().join("o"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("ingest"), "{stderr}");
    assert!(dir.path().join("o/failure.json").is_file());

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,goodbad\n1,0\n2,\n").unwrap();
    let out = creditscope(&["train", "--input", p(&bad), "--kind", "extra_trees", "--out", p(&dir.path().join("m.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing label"));

    let out = creditscope(&["train", "--input", p(&bad), "--kind", "no_such_model", "--out", "x"]);
    assert!(!out.status.success());
}
