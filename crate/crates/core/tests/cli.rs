use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_setpose");

const TINY: &str = r#"{
  "model": {"embed_dim": 16, "n_heads": 2, "n_encoder_layers": 1, "n_decoder_layers": 1, "n_queries": 3, "ffn_dim": 32},
  "train": {"total_epochs": 2, "lr_drop_epoch": 1, "batch_size": 4, "lr_transformer": 1e-3, "lr_backbone": 1e-4},
  "data": {"n_samples": 16}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).env_remove("SETPOSE_THREADS").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Relative path to contents for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn gen_data_is_byte_identical_and_records_the_split() {
    let w = workspace();
    let d = w.path();
    ok(d, &["gen-data", "--config", "tiny.json", "--out", "a", "--split", "test-shifted"]);
    ok(d, &["gen-data", "--config", "tiny.json", "--out", "b", "--split", "test-shifted", "--threads", "1"]);
    let (a, b) = (snapshot(&d.join("a")), snapshot(&d.join("b")));
    assert_eq!(a.len(), 2 + 16);
    assert_eq!(a, b);
    let meta: serde_json::Value = serde_json::from_slice(&a[Path::new("meta.json")]).unwrap();
    assert_eq!(meta["gen_config"]["subject_scale_factor"], 1.3);
    assert_eq!(meta["split"], "test-shifted");
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let w = workspace();
    let d = w.path();
    fs::write(d.join("bad.json"), r#"{"data": {"n_sampels": 3}}"#).unwrap();
    let o = run(d, &["gen-data", "--config", "bad.json", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_sampels"));
    assert!(!d.join("x").exists());
    assert_eq!(code(&run(d, &["gen-data", "--config", "missing.json", "--out", "x"])), 3);
    assert_eq!(code(&run(d, &["gen-data", "--out", "x", "--split", "holdout"])), 2);
    assert_eq!(code(&run(d, &["gen-data", "--out", "x", "--threads", "many"])), 2);
}

#[test]
fn outputs_need_force() {
    let w = workspace();
    let d = w.path();
    ok(d, &["gen-data", "--config", "tiny.json", "--out", "a"]);
    let o = run(d, &["gen-data", "--config", "tiny.json", "--out", "a", "--n-samples", "4"]);
    assert_eq!(code(&o), 3);
    assert_eq!(snapshot(&d.join("a")).len(), 18);
    ok(d, &["gen-data", "--config", "tiny.json", "--out", "a", "--n-samples", "4", "--force"]);
    assert_eq!(snapshot(&d.join("a")).len(), 6);
}

#[test]
fn scale_stats_output_and_empty_side() {
    let w = workspace();
    let d = w.path();
    ok(d, &["gen-data", "--config", "tiny.json", "--out", "tr"]);
    let text = ok(d, &["scale-stats", "--data", "tr", "--out", "s.json"]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("s.json")).unwrap()).unwrap();
    assert_eq!(serde_json::to_string_pretty(&v).unwrap() + "\n", text);
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["mean_scale_left", "mean_scale_right", "n_left", "n_right"]);

    fs::write(d.join("none.json"), r#"{"data": {"n_samples": 4, "presence_prob": 0.0}}"#).unwrap();
    ok(d, &["gen-data", "--config", "none.json", "--out", "empty"]);
    let o = run(d, &["scale-stats", "--data", "empty", "--out", "e.json"]);
    assert_eq!(code(&o), 4);
    assert!(!d.join("e.json").exists());
    assert_eq!(code(&run(d, &["scale-stats", "--data", "nowhere", "--out", "e.json"])), 3);
}

#[test]
fn train_predict_eval_pipeline() {
    let w = workspace();
    let d = w.path();
    ok(d, &["gen-data", "--config", "tiny.json", "--out", "tr"]);
    ok(d, &["gen-data", "--config", "tiny.json", "--out", "te", "--split", "test-shifted"]);
    ok(d, &["scale-stats", "--data", "tr", "--out", "s.json"]);
    ok(d, &["train", "--config", "tiny.json", "--data", "tr", "--val", "te", "--out", "run"]);
    for f in ["train_log.jsonl", "config.json", "final/manifest.json", "best/params.bin", "checkpoints/epoch-002/manifest.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"step\"") && l.contains("\"kind\":\"step\"")).count(), 8);

    ok(d, &["predict", "--checkpoint", "run/final", "--data", "te", "--out", "p.jsonl"]);
    assert_eq!(fs::read_to_string(d.join("p.jsonl")).unwrap().lines().count(), 16);
    for rescale in [false, true] {
        let mut a = vec!["eval", "--checkpoint", "run/final", "--data", "te", "--scale-stats", "s.json", "--out", "r1.json", "--force"];
        let mut b = vec!["eval", "--predictions", "p.jsonl", "--data", "te", "--scale-stats", "s.json", "--out", "r2.json", "--force"];
        if rescale {
            a.push("--rescale");
            b.push("--rescale");
        }
        let (ta, tb) = (ok(d, &a), ok(d, &b));
        assert_eq!(ta, tb);
        assert!(ta.contains(if rescale { "rescaling: on" } else { "rescaling: off" }));
        assert_eq!(fs::read(d.join("r1.json")).unwrap(), fs::read(d.join("r2.json")).unwrap());
    }

    let o = run(d, &["eval", "--checkpoint", "run/nothing", "--data", "te"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("run/nothing"));
    assert_eq!(code(&run(d, &["eval", "--predictions", "p.jsonl", "--data", "te", "--rescale"])), 2);
    assert_eq!(code(&run(d, &["eval", "--data", "te"])), 2);
}

#[test]
fn failed_training_leaves_no_output() {
    let w = workspace();
    let d = w.path();
    fs::write(d.join("big.json"), r#"{"data": {"n_samples": 4, "image_height": 64, "image_width": 64}}"#).unwrap();
    ok(d, &["gen-data", "--config", "big.json", "--out", "big"]);
    let o = run(d, &["train", "--config", "tiny.json", "--data", "big", "--out", "run"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!d.join("run").exists());
}

#[test]
fn threads_from_environment() {
    let w = workspace();
    let d = w.path();
    let o = Command::new(BIN)
        .current_dir(d)
        .args(["gen-data", "--config", "tiny.json", "--out", "a"])
        .env("SETPOSE_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = Command::new(BIN)
        .current_dir(d)
        .args(["gen-data", "--config", "tiny.json", "--out", "b"])
        .env("SETPOSE_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_writes_table() {
    let w = workspace();
    let d = w.path();
    fs::write(
        d.join("abl.json"),
        r#"{"train": {"total_epochs": 1, "lr_drop_epoch": 0, "batch_size": 4},
            "data": {"n_samples": 8}, "eval_samples": 4,
            "variants": [{"name": "rel", "resolution_factor": 1, "depth_mode": "RootPlusRelative"},
                         {"name": "abs", "resolution_factor": 1, "depth_mode": "AbsolutePerJoint"}]}"#,
    )
    .unwrap();
    let text = ok(d, &["ablate", "--config", "abl.json", "--out", "t.json"]);
    assert!(text.contains("rel") && text.contains("abs"));
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("t.json")).unwrap()).unwrap();
    assert_eq!(t["rows"].as_array().unwrap().len(), 2);
    assert_eq!(t["units"], "mm");
}
