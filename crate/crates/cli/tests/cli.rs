use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn seqseg(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_seqseg"));
    cmd.args(args).env_remove("SEQSEG_SEED");
    if let Some(s) = seed {
        cmd.env("SEQSEG_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn write(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_data(dir: &Path, seed: Option<&str>) -> Value {
    let cfg = dir.join("data.json");
    write(&cfg, &json!({"num_samples": 8, "split": [0.5, 0.25, 0.25], "seed": 3}));
    ok(&seqseg(&["gen-data", "--config", s(&cfg), "--out", s(&dir.join("data"))], seed))
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = tiny_data(d, None);
    assert_eq!(gen["train"], 4);
    assert_eq!(gen["test"], 2);

    let train_cfg = d.join("train.json");
    write(
        &train_cfg,
        &json!({"dataset": "data", "checkpoint": "model.ckpt", "m_train": 4, "max_epochs": 2, "seed": 1}),
    );
    let summary = ok(&seqseg(&["train", "--config", s(&train_cfg)], None));
    assert_eq!(summary["history"].as_array().unwrap().len(), 2);
    let ckpt = d.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(d.join("model.log.jsonl").exists());

    let report = d.join("r.json");
    let ev = ok(&seqseg(
        &["eval", "--checkpoint", s(&ckpt), "--data", s(&d.join("data")), "--num-masks", "4", "--out", s(&report)],
        None,
    ));
    assert_eq!(ev[0]["num_samples"], 2);
    let text = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(text.starts_with("sample_id,ged,dice_avg\n"));
    assert_eq!(text.lines().count(), 3);

    // default: M = K and M = 10
    let ev = ok(&seqseg(
        &["eval", "--checkpoint", s(&ckpt), "--data", s(&d.join("data")), "--out", s(&d.join("both.json"))],
        None,
    ));
    assert_eq!(ev.as_array().unwrap().len(), 2);
    assert!(d.join("both_m3.json").exists());
    assert!(d.join("both_m10.json").exists());

    let cmp = ok(&seqseg(&["compare", "--a", s(&report), "--b", s(&report), "--metric", "ged"], None));
    assert_eq!(cmp["p_value"], 1.0);
    assert_eq!(cmp["better"], "tie");

    let panels = d.join("panels");
    let p = ok(&seqseg(
        &["panels", "--checkpoint", s(&ckpt), "--data", s(&d.join("data")), "--out", s(&panels)],
        None,
    ));
    assert_eq!(p["panels"], 2);
    assert_eq!(p["num_masks"], 4);
    assert_eq!(std::fs::read_dir(&panels).unwrap().count(), 2);
}

#[test]
fn errors_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqseg(
        &["eval", "--checkpoint", s(&dir.path().join("missing.ckpt")), "--data", "nowhere", "--num-masks", "2", "--out", "x.json"],
        None,
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    let v: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(v["error"], "io");
    assert!(v["message"].as_str().unwrap().contains("missing.ckpt"));

    let out = seqseg(&["compare", "--a", "a.json", "--b", "b.json", "--metric", "auc"], None);
    let v: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["error"], "invalid_argument");
}

#[test]
fn bad_config_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, "{\"m_train\": \"three\"}").unwrap();
    let out = seqseg(&["train", "--config", s(&cfg)], None);
    assert!(!out.status.success());
    let v: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["error"], "format");
}

#[test]
fn seed_env_overrides_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let base = tiny_data(a.path(), None)["checksum"].clone();
    let same = tiny_data(b.path(), Some("3"))["checksum"].clone();
    let other = tiny_data(c.path(), Some("4"))["checksum"].clone();
    assert_eq!(base, same);
    assert_ne!(base, other);
}
