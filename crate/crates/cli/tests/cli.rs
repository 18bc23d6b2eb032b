use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 4] = ["--set", "d=16", "--set", "max_len=16"];

fn tagmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagmae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn binary")
}

fn ok(args: &[&str]) -> Output {
    let out = tagmae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = SMALL.to_vec();
    v.extend_from_slice(args);
    v
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// gen-synth, a short pre-training run and an embedding export.
fn trained(root: &Path) -> (String, String, String) {
    let data = root.join("data").to_str().unwrap().to_string();
    let ckpt = root.join("ckpt").to_str().unwrap().to_string();
    let tsv = root.join("emb.tsv").to_str().unwrap().to_string();
    ok(&["gen-synth", "--out", &data, "--nodes-per-class", "10"]);
    ok(&with_small(&["pretrain", "--data", &data, "--out", &ckpt, "--steps", "3"]));
    ok(&with_small(&["embed", "--data", &data, "--checkpoint", &ckpt, "--out", &tsv]));
    (data, ckpt, tsv)
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt, tsv) = trained(dir.path());
    for f in ["nodes.jsonl", "edges.jsonl", "splits.json", "manifest.json"] {
        assert!(Path::new(&data).join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(Path::new(&ckpt).join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let manifest = json(&Path::new(&ckpt).join("manifest.json"));
    assert_eq!(manifest["step"], 3);
    assert_eq!(manifest["run"]["command"], "pretrain");

    let text = fs::read_to_string(&tsv).unwrap();
    assert!(text.starts_with("#dim=16\n"));
    assert_eq!(text.lines().count(), 31);
    assert_eq!(json(Path::new(&format!("{tsv}.manifest.json")))["rows"], 30);

    let rep = dir.path().join("fs.json");
    ok(&["fewshot", "--data", &data, "--embeddings", &tsv, "--out", rep.to_str().unwrap(), "--tasks", "20"]);
    let r = json(&rep);
    assert_eq!(r["N"], 3);
    assert_eq!(r["K"], 3);
    assert_eq!(r["num_tasks"], 20);
    let mean = r["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));

    let probe = dir.path().join("probe.json");
    ok(&["probe", "--data", &data, "--embeddings", &tsv, "--out", probe.to_str().unwrap(), "--epochs", "50"]);
    assert!(json(&probe)["test_accuracy"].as_f64().is_some());
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt, _) = trained(dir.path());
    ok(&with_small(&["pretrain", "--data", &data, "--out", &ckpt, "--steps", "5", "--resume"]));
    let log = fs::read_to_string(Path::new(&ckpt).join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4]);
}

#[test]
fn sample_ppr_and_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, tsv) = trained(dir.path());
    let out = ok(&["sample-ppr", "--data", &data, "--anchors", "0,5", "--level", "edge", "--topk", "4"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let subs = r["subgraphs"].as_array().unwrap();
    assert_eq!(subs.len(), 2);
    assert_eq!(subs[1]["anchor"], 5);
    assert!(subs[0]["nodes"].as_array().unwrap().len() <= 5);

    let single = ok(&["sample-ppr", "--data", &data, "--anchor", "3", "--alpha", "1.0"]);
    let r: Value = serde_json::from_slice(&single.stdout).unwrap();
    assert_eq!(r["subgraphs"][0]["nodes"], serde_json::json!([3]));

    let jsonl = dir.path().join("inst.jsonl");
    ok(&[
        "emit-instructions",
        "--data",
        &data,
        "--embeddings",
        &tsv,
        "--out",
        jsonl.to_str().unwrap(),
        "--domain",
        "citation",
        "--split",
        "test",
    ]);
    let text = fs::read_to_string(&jsonl).unwrap();
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["prompt"].as_str().unwrap().contains("<node_v>"));
    assert!(first["prompt"].as_str().unwrap().ends_with("Answer: "));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["passed"], true);
    assert_eq!(r["target_grad_max"], 0.0);
}

#[test]
fn exit_codes() {
    assert_eq!(tagmae(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(tagmae(&["pretrain", "--data", "x"]).status.code(), Some(2));
    let missing = tagmae(&["embed", "--data", "/nonexistent", "--checkpoint", "/nonexistent", "--out", "/tmp/x"]);
    assert_eq!(missing.status.code(), Some(1));
    let err = String::from_utf8_lossy(&missing.stderr);
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error: "), "{err}");
    assert_eq!(tagmae(&["--set", "bogus_key=1", "gradcheck"]).status.code(), Some(1));
}

#[test]
fn environment_and_flags_layer_over_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 5, "ways": 2}"#).unwrap();
    let out = dir.path().join("synth");
    let o = out.to_str().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_tagmae"))
        .args(["--config", cfg.to_str().unwrap(), "--seed", "9", "gen-synth", "--out", o])
        .env("RUST_LOG", "warn")
        .env("TAGMAE_WAYS", "4")
        .env("TAGMAE_SEED", "6")
        .status()
        .unwrap();
    assert!(status.success());
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["ways"], 4);
}
