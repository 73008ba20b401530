use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn amel(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amel"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn amel")
}

fn ok(args: &[&str], out: &Path) -> Output {
    let o = amel(args, out);
    assert!(
        o.status.success(),
        "amel {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: [&str; 4] = ["--samples", "40", "--iters", "6"];

#[test]
fn default_pipeline_writes_declared_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&["gen-data"], out);
    let data = out.join("dataset.amel");
    let data_arg = data.to_str().unwrap();
    let before = fs::read(&data).unwrap();
    ok(&["train", "--dataset", data_arg], out);
    ok(&["eval", "--dataset", data_arg], out);

    for f in [
        "dataset.amel",
        "gen_data_config.json",
        "gen_data_manifest.json",
        "train_config.json",
        "train_manifest.json",
        "domain3/checkpoint.bin",
        "domain3/train_log.jsonl",
        "eval_config.json",
        "eval_manifest.json",
        "eval_report.json",
        "roc.csv",
        "features.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {}", f);
    }
    assert_eq!(fs::read(&data).unwrap(), before, "dataset was modified");

    let manifest = read_json(&out.join("train_manifest.json"));
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    let log = fs::read_to_string(out.join("domain3/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 300);
    let report = read_json(&out.join("eval_report.json"));
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(report["per_strategy"].as_object().unwrap().len(), 4);
    assert!(fs::read_to_string(out.join("roc.csv")).unwrap().starts_with("threshold,far,frr\n"));
}

#[test]
fn gradcheck_passes_on_micro_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["gradcheck"], dir.path());
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    let r = read_json(&dir.path().join("gradcheck.json"));
    assert_eq!(r["pass"], true);
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(r["report"]["parameters"].as_u64().unwrap() <= 2000);
}

#[test]
fn identical_configs_give_identical_reports() {
    let root = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = root.path().join(name);
        let mut args = vec!["train"];
        args.extend(SMALL);
        args.extend(extra);
        ok(&args, &out);
        let mut args = vec!["eval"];
        args.extend(SMALL);
        args.extend(extra);
        ok(&args, &out);
        out
    };
    let a = run("a", &["--seed", "3"]);
    let b = run("b", &["--seed", "3"]);
    assert_eq!(fs::read(a.join("eval_report.json")).unwrap(), fs::read(b.join("eval_report.json")).unwrap());
    assert_eq!(
        fs::read(a.join("domain3/checkpoint.bin")).unwrap(),
        fs::read(b.join("domain3/checkpoint.bin")).unwrap()
    );

    // the saved config alone reproduces the run
    let saved = a.join("train_config.json");
    let c = root.path().join("c");
    ok(&["train", "--config", saved.to_str().unwrap()], &c);
    ok(&["eval", "--config", saved.to_str().unwrap()], &c);
    assert_eq!(fs::read(a.join("eval_report.json")).unwrap(), fs::read(c.join("eval_report.json")).unwrap());

    let d = run("d", &["--seed", "4"]);
    assert_ne!(fs::read(a.join("eval_report.json")).unwrap(), fs::read(d.join("eval_report.json")).unwrap());
}

#[test]
fn limited_protocol_trains_on_two_domains() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--protocol", "limited"];
    args.extend(SMALL);
    let o = ok(&args, dir.path());
    assert!(String::from_utf8_lossy(&o.stdout).contains("fold train [0, 1] test 3"));
    assert!(dir.path().join("domain3/checkpoint.bin").is_file());

    let mut args = vec!["train", "--protocol", "limited", "--target-domain", "0"];
    args.extend(SMALL);
    let o = ok(&args, dir.path());
    assert!(String::from_utf8_lossy(&o.stdout).contains("fold train [1, 2] test 0"));
}

#[test]
fn ablate_writes_all_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate"];
    args.extend(SMALL);
    ok(&args, dir.path());
    let r = read_json(&dir.path().join("ablation.json"));
    let designs: Vec<&str> = r["expert_designs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["design"].as_str().unwrap())
        .collect();
    assert_eq!(designs, vec!["IN+Conv+Relu", "BN+Conv+Relu", "Conv+IN+Relu", "Conv+BN+Relu"]);
    assert_eq!(r["aggregation"].as_object().unwrap().len(), 4);
    assert_eq!(r["inference"].as_array().unwrap().len(), 4);
}

fn error_record(o: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({}): {}", e, stderr))
}

#[test]
fn invalid_config_fails_with_named_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"batch_per_domain": 1}}"#).unwrap();
    let o = amel(&["train", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert!(!o.status.success());
    let rec = error_record(&o);
    assert_eq!(rec["error"]["kind"], "config");
    assert_eq!(rec["error"]["field"], "train.batch_per_domain");
    assert_eq!(rec["error"]["command"], "train");
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = amel(&["eval", "--samples", "10", "--checkpoint", "/nonexistent/model.bin"], dir.path());
    assert!(!o.status.success());
    assert_eq!(error_record(&o)["error"]["kind"], "io");
}

#[test]
fn malformed_config_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{ not json").unwrap();
    let o = amel(&["gradcheck", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert_eq!(error_record(&o)["error"]["kind"], "json");
}
