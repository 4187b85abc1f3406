use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn small_config() -> Value {
    json!({
        "schema_version": 1,
        "seed": 3,
        "paths": {
            "corpus_in": data("toy_clinical.txt"),
            "corpus_cross": data("toy_kitchen.txt"),
            "out_dir": "unused"
        },
        "split": { "train": 0.9, "validation": 0.1 },
        "model": { "context_length": 32, "n_layers": 1, "d_model": 16, "n_heads": 2, "d_ffn": 16 },
        "train": { "steps": 30, "batch": 4, "seq": 32, "lr": 0.003, "warmup": 5 },
        "calibration": { "n": 8, "len": 32 },
        "optimizer": {
            "alpha": 0.01, "target_fraction": 0.5, "iterations": 20, "step_size": 0.05,
            "temperature_start": 1.0, "temperature_end": 0.05, "batch": 4, "eta": 0.5
        },
        "lora": { "rank": 2, "alpha": 4.0, "train": { "steps": 10, "batch": 4, "seq": 32, "lr": 0.01, "warmup": 2 } },
        "quant": { "policy": "matmul" },
        "eval": { "throughput": false, "gen_tokens": 4, "warmup": 0, "repeats": 1 },
        "sweep": { "fractions": [0.0, 0.5], "finetune": true, "measure_throughput": false },
        "oracle": {
            "context_length": 16, "d_model": 16, "n_heads": 2, "d_ffn": 4,
            "train": { "steps": 20, "batch": 4, "seq": 16, "lr": 0.003, "warmup": 2 },
            "batch": 4, "target_fraction": 0.5, "alpha": 0.5
        }
    })
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(stage: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salprune"))
        .arg(stage)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config();
    v["optimizer"]["alhpa"] = json!(0.1);
    let o = run("train", &write_config(dir.path(), &v), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alhpa"), "{}", stderr(&o));

    let mut v = small_config();
    v["optimizer"]["alpha"] = json!(1.5);
    let o = run("train", &write_config(dir.path(), &v), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));

    let mut v = small_config();
    v["schema_version"] = json!(9);
    let o = run("train", &write_config(dir.path(), &v), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));

    let o = run("train", &dir.path().join("absent.json"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_upstream_artifact_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    let o = run("prune", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));

    let ckpt = dir.path().join("base.spt");
    let c = salprune::model::Checkpoint::init(
        salprune::model::ModelConfig::uniform(258, 32, 1, 16, 2, 16),
        1,
    )
    .unwrap();
    c.save(&ckpt).unwrap();
    let o = run("prune", &cfg, &out, &["--ckpt", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("calibrate"), "{}", stderr(&o));

    let o = run("eval", &cfg, &out, &["--ckpt", "/nonexistent.spt"]);
    assert_eq!(o.status.code(), Some(3));
}

fn sha256(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn pipeline(config: &Path, out: &Path, threads: &str) {
    for stage in ["train", "calibrate", "prune", "finetune", "quantize", "eval", "sweep", "oracle"] {
        let o = Command::new(env!("CARGO_BIN_EXE_salprune"))
            .args([stage, "--config"])
            .arg(config)
            .arg("--out")
            .arg(out)
            .env("SALPRUNE_THREADS", threads)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        ok(&o);
        let manifest: Value =
            serde_json::from_slice(&std::fs::read(out.join(stage).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["stage"], stage);
        for a in manifest["outputs"].as_array().unwrap() {
            let p = PathBuf::from(a["path"].as_str().unwrap());
            assert_eq!(a["sha256"].as_str().unwrap(), sha256(&p), "{}", p.display());
        }
    }
}

#[test]
fn pipeline_replays_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&cfg, &a, "1");
    pipeline(&cfg, &b, "1");
    let fa = files(&a);
    assert_eq!(
        fa.iter().map(|p| p.strip_prefix(&a).unwrap()).collect::<Vec<_>>(),
        files(&b).iter().map(|p| p.strip_prefix(&b).unwrap()).collect::<Vec<_>>()
    );
    for p in &fa {
        let rel = p.strip_prefix(&a).unwrap();
        if rel.file_name().unwrap() == "manifest.json" {
            continue;
        }
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{}", rel.display());
    }
    for name in ["in", "cross"] {
        let csv = std::fs::read_to_string(a.join(format!("sweep/sweep_{name}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("fraction,params,ppl_in,ppl_cross,mcq_acc,mcq_ci_lo,mcq_ci_hi,tok_s,retention,status"));
    }
    let eq: Value = serde_json::from_slice(&std::fs::read(a.join("prune/equivalence.json")).unwrap()).unwrap();
    assert_eq!(eq["passed"], true);
    let oracle: Value = serde_json::from_slice(&std::fs::read(a.join("oracle/report.json")).unwrap()).unwrap();
    assert_eq!(oracle["report"]["evaluated"], 16);
}

#[test]
fn help_lists_every_stage() {
    let o = Command::new(env!("CARGO_BIN_EXE_salprune")).arg("--help").output().unwrap();
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    for stage in ["train", "calibrate", "prune", "finetune", "quantize", "eval", "sweep", "oracle"] {
        assert!(text.contains(stage), "{text}");
    }
    let o = Command::new(env!("CARGO_BIN_EXE_salprune")).arg("bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
