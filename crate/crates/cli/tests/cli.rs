use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use equimodal_cli::manifest::{verify, MANIFEST_FILE};
use equimodal_cli::{EXIT_CONFIG, EXIT_NUMERIC};
use serde_json::Value;

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equimodal")).args(args).output().unwrap()
}

fn run_in(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(extra);
    run(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v = json(&smoke());
    edit(&mut v);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    path
}

#[test]
fn train_writes_a_complete_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run_in("train", &smoke(), &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "report.json", "epoch_log.jsonl", "robustness.csv", "projection.csv", "timing.json", MANIFEST_FILE] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(out.join("checkpoint").is_dir());

    let report = json(&out.join("report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 3);
    let fm = &report["final_metrics"];
    assert_eq!(fm["per_modality_accuracy"].as_array().unwrap().len(), 2);
    assert_eq!(fm["subset_accuracy"].as_array().unwrap().len(), 4);
    let log = std::fs::read_to_string(out.join("epoch_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let csv = std::fs::read_to_string(out.join("robustness.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "rate,mean_acc,std_acc,n_seeds");
    let projection = std::fs::read_to_string(out.join("projection.csv")).unwrap();
    assert_eq!(projection.lines().next().unwrap(), "epoch,modality,pc1,pc2,degenerate");

    assert!(verify(&out).unwrap().is_empty());
    let manifest = json(&out.join(MANIFEST_FILE));
    assert_eq!(manifest["volatile"], serde_json::json!(["timing.json"]));
}

#[test]
fn eval_reproduces_the_trained_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    assert!(run_in("train", &smoke(), &train_dir, &[]).status.success());
    let eval_dir = tmp.path().join("eval");
    let checkpoint = train_dir.join("checkpoint");
    let o = run_in("eval", &smoke(), &eval_dir, &["--checkpoint", checkpoint.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trained = json(&train_dir.join("report.json"))["final_metrics"].clone();
    let evaluated = json(&eval_dir.join("eval.json"))["final_metrics"].clone();
    assert_eq!(trained, evaluated);
    assert_eq!(
        std::fs::read(train_dir.join("robustness.csv")).unwrap(),
        std::fs::read(eval_dir.join("robustness.csv")).unwrap()
    );
}

#[test]
fn saved_data_trains_like_generated_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("gen");
    assert!(run_in("gen-data", &smoke(), &data_dir, &[]).status.success());
    let data = data_dir.join("data");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run_in("train", &smoke(), &a, &[]).status.success());
    assert!(run_in("train", &smoke(), &b, &["--data", data.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read(a.join("report.json")).unwrap(), std::fs::read(b.join("report.json")).unwrap());
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run_in("train", &smoke(), &a, &["--seed", "1"]).status.success());
    assert!(run_in("train", &smoke(), &b, &["--seed", "2"]).status.success());
    let (ra, rb) = (json(&a.join("report.json")), json(&b.join("report.json")));
    assert_eq!(ra["config"]["data"]["seed"], 1);
    assert_eq!(ra["config"]["training"]["seed"], 1);
    assert_ne!(ra["final_metrics"], rb["final_metrics"]);
}

#[test]
fn unknown_key_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), |v| v["training"]["learning_rate"] = 0.1.into());
    let o = run_in("train", &config, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("training.learning_rate"), "{err}");
}

#[test]
fn invalid_values_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), |v| v["model"]["alignment"]["tau"] = 1.5.into());
    assert_eq!(run_in("train", &config, &tmp.path().join("a"), &[]).status.code(), Some(EXIT_CONFIG));
    let config = write_config(tmp.path(), |v| v["data"]["dims"] = serde_json::json!([2, 2]));
    assert_eq!(run_in("train", &config, &tmp.path().join("b"), &[]).status.code(), Some(EXIT_CONFIG));
    assert_eq!(run(&["train"]).status.code(), Some(EXIT_CONFIG));
    std::fs::write(tmp.path().join("broken.json"), "{").unwrap();
    assert_eq!(run_in("train", &tmp.path().join("broken.json"), &tmp.path().join("c"), &[]).status.code(), Some(EXIT_CONFIG));
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), |v| {
        v["training"]["optimizer"] = serde_json::json!({"kind": "sgd", "lr": 1e200, "weight_decay": 0.0});
    });
    let o = run_in("train", &config, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(EXIT_NUMERIC), "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("epoch") && err.contains("batch"), "{err}");
}

#[test]
fn tampered_artifacts_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert!(run_in("train", &smoke(), &out, &[]).status.success());
    std::fs::write(out.join("report.json"), "{}").unwrap();
    let bad = verify(&out).unwrap();
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0].path, "report.json");
    // a rerun rewrites the artifact with the recorded hash
    let o = run_in("train", &smoke(), &out, &[]);
    assert!(o.status.success());
    assert!(verify(&out).unwrap().is_empty());
}

#[test]
fn rerun_with_another_seed_warns_but_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert!(run_in("train", &smoke(), &out, &["--seed", "1"]).status.success());
    let o = run_in("train", &smoke(), &out, &["--seed", "2"]);
    assert!(o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("warning: report.json changed"), "{err}");
}

#[test]
fn theory_check_prints_the_table() {
    let o = run(&["theory-check", "--kappa", "0,0.5", "--trials", "1000"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let mc = v["monte_carlo"].as_array().unwrap();
    assert_eq!(mc.len(), 2);
    assert_eq!(mc[0]["fraction_positive"], 0.0);
    assert_eq!(mc[1]["fraction_positive"], 1.0);
    let row = &v["closed_form"][0];
    let (w2s, s2w) = (row["loss_w2s"].as_f64().unwrap(), row["loss_s2w"].as_f64().unwrap());
    assert!((row["gap"].as_f64().unwrap() - (s2w - w2s)).abs() < 1e-12);

    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["theory-check", "--trials", "100", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(tmp.path().join("theory.json").is_file());
    assert_eq!(run(&["theory-check", "--kappa", "-1"]).status.code(), Some(EXIT_CONFIG));
}

#[test]
fn sweep_and_order_reports_have_their_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep = tmp.path().join("sweep");
    assert!(run_in("sweep-threshold", &smoke(), &sweep, &[]).status.success());
    let csv = std::fs::read_to_string(sweep.join("threshold.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "tau,multi_acc,edm");
    assert_eq!(lines.len(), 3);

    let orders = tmp.path().join("orders");
    assert!(run_in("compare-orders", &smoke(), &orders, &[]).status.success());
    let v = json(&orders.join("compare_orders.json"));
    let policies: Vec<&str> = v["policies"].as_array().unwrap().iter().map(|p| p["policy"].as_str().unwrap()).collect();
    assert_eq!(policies, ["edm", "w2s", "s2w", "random"]);
    assert_eq!(v["seeds"], serde_json::json!([0, 1]));
}
