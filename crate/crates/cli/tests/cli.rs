use std::path::Path;
use std::process::{Command, Output};

fn pro2sam(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pro2sam"))
        .args(["--log", "warn"])
        .args(args)
        .output()
        .expect("spawn pro2sam");
    out
}

fn ok(args: &[&str]) -> String {
    let out = pro2sam(args);
    assert!(
        out.status.success(),
        "pro2sam {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

const CONFIG: &str = r#"{
  "model": {
    "image_size": 32, "patch_size": 8, "embed_dim": 16, "num_heads": 2,
    "num_blocks": 2, "num_gta_blocks": 1, "num_global_tokens": 4,
    "num_classes": 2, "downsample_size": 8, "mlp_ratio": 2
  },
  "optimizer": {"lr": 0.001},
  "schedule": {"epochs": 1, "batch_size": 4, "val_fraction": 0.25},
  "dataset": {"kind": "synth", "root": "DATA", "preprocess": {"resize": 32, "crop": 32}},
  "output_dir": "RUN"
}"#;

#[test]
fn end_to_end_on_synthetic_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = t.join("data");
    let run = t.join("run");
    let cache = t.join("cache");

    ok(&[
        "synth",
        "--out",
        s(&data),
        "--classes",
        "2",
        "--train-per-class",
        "4",
        "--test-per-class",
        "3",
        "--canvas",
        "32",
    ]);
    assert!(data.join("synth_manifest.json").exists());

    let cfg = t.join("config.json");
    std::fs::write(&cfg, CONFIG.replace("DATA", s(&data)).replace("RUN", s(&run))).unwrap();
    ok(&["train", "--config", s(&cfg)]);
    let best = run.join("checkpoints/best.safetensors");
    assert!(best.exists());
    assert!(run.join("checkpoints/last.safetensors").exists());
    assert_eq!(count_lines(&run.join("train_log.jsonl")), 2);

    let summary = ok(&[
        "gen-masks",
        "--config",
        s(&cfg),
        "--cache",
        s(&cache),
        "--grid-side",
        "8",
    ]);
    assert!(summary.starts_with("6 galleries"), "{summary}");

    let pro = t.join("pro");
    let table = ok(&[
        "infer",
        "--checkpoint",
        s(&best),
        "--cache",
        s(&cache),
        "--out",
        s(&pro),
    ]);
    assert!(table.contains("GT-Known"), "{table}");
    assert!(table.contains("fallback used on"), "{table}");
    assert_eq!(count_lines(&pro.join("predictions.jsonl")), 6);
    assert_eq!(count_lines(&pro.join("matches.jsonl")), 6);
    assert_eq!(std::fs::read_dir(pro.join("maps")).unwrap().count(), 6);
    assert!(pro.join("infer_manifest.json").exists());

    let only = t.join("only");
    ok(&[
        "infer",
        "--checkpoint",
        s(&best),
        "--mode",
        "gtformer-only",
        "--out",
        s(&only),
    ]);

    let matched = t.join("matched.jsonl");
    ok(&[
        "match",
        "--cache",
        s(&cache),
        "--maps",
        s(&pro.join("maps")),
        "--out",
        s(&matched),
    ]);
    // matching offline against the saved maps reproduces the inference-time matches
    let a: Vec<serde_json::Value> = std::fs::read_to_string(&matched)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let b: Vec<serde_json::Value> = std::fs::read_to_string(pro.join("matches.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let key = |v: &serde_json::Value| v["image_id"].as_str().unwrap().to_string();
    let mut a = a;
    let mut b = b;
    a.sort_by_key(key);
    b.sort_by_key(key);
    assert_eq!(a, b);

    let report = t.join("report.json");
    ok(&[
        "evaluate",
        "--predictions",
        s(&pro.join("predictions.jsonl")),
        "--maps",
        s(&only.join("maps")),
        "--image-size",
        "32",
        "--out",
        s(&report),
    ]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.is_object());

    let vis = t.join("vis");
    let msg = ok(&[
        "visualize",
        "--checkpoint",
        s(&best),
        "--predictions",
        s(&pro.join("predictions.jsonl")),
        "--matches",
        s(&pro.join("matches.jsonl")),
        "--maps",
        s(&pro.join("maps")),
        "--out",
        s(&vis),
        "--limit",
        "3",
    ]);
    assert!(msg.starts_with("wrote 3 overlays"), "{msg}");
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = pro2sam(&["train", "--config", s(&missing)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    let out = pro2sam(&["train", "--loss-ratio", "1-0.5", "--epochs", "0"]);
    assert!(!out.status.success());

    let out = pro2sam(&["infer", "--checkpoint", s(&missing), "--out", s(tmp.path())]);
    assert!(!out.status.success());
}
