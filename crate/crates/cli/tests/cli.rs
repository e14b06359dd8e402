use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use omr_core::dataset::DatasetConfig;
use omr_core::network::ModelConfig;
use omr_core::scenegen::{OcclusionProfile, SceneRanges};
use omr_core::training::TrainConfig;
use serde_json::{json, Value};

fn omr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omr"))
        .args(args)
        .env_remove("OMR_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small shapes so each command runs in about a second.
fn write_config(dir: &Path) -> PathBuf {
    let dataset = DatasetConfig {
        seed: 3,
        image_height: 32,
        image_width: 64,
        n_rows: 8,
        horizon: 10.0,
        m: 3,
        frames: 4,
        train_clips: 3,
        test_clips: 2,
        train: SceneRanges {
            min_lanes: 2,
            max_lanes: 3,
            occlusion: OcclusionProfile::light(),
        },
        test: SceneRanges {
            min_lanes: 2,
            max_lanes: 3,
            occlusion: OcclusionProfile::heavy(),
        },
        stripe_width: 4.0,
    };
    let model = ModelConfig {
        image_height: 32,
        image_width: 64,
        k: 8,
        m: 3,
        n_rows: 8,
        horizon: 10.0,
        backbone: [4, 6, 8, 8, 8],
        ..ModelConfig::desk()
    };
    let train = TrainConfig {
        step1_epochs: 2,
        step2_epochs: 1,
        batch_size: 2,
        tbptt: 2,
        ..TrainConfig::default()
    };
    let path = dir.join("config.json");
    let cfg = json!({ "dataset": dataset, "model": model, "train": train, "ablation": { "seeds": [1], "variants": ["full"] } });
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic_and_guards_existing_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(omr(&["generate", "--config", s(&cfg), "--out", s(&a), "--seed", "7"]));
    ok(omr(&["generate", "--config", s(&cfg), "--out", s(&b), "--seed", "7"]));
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), tb.len());
    for ((pa, ba), (pb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        if pa != Path::new("run_config.json") {
            assert_eq!(ba, bb, "{}", pa.display());
        }
    }
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["clips"].as_array().unwrap().len(), 5);

    let again = omr(&["generate", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&again), 2);
    ok(omr(&["generate", "--config", s(&cfg), "--out", s(&a), "--force", "--train-clips", "1"]));
    assert_eq!(read_json(&a.join("manifest.json"))["clips"].as_array().unwrap().len(), 3);
}

#[test]
fn zero_clips_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("d");
    let o = omr(&["generate", "--config", s(&cfg), "--out", s(&out), "--train-clips", "0", "--test-clips", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_prerequisites() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    let o = omr(&["train", "--config", s(&cfg), "--step", "1", "--data", s(&data), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 3);
    ok(omr(&["generate", "--config", s(&cfg), "--out", s(&data)]));
    let o = omr(&["train", "--config", s(&cfg), "--step", "2", "--data", s(&data), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--init"));
}

#[test]
fn train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(t);
    let (data, s1, s2, ev) = (t.join("data"), t.join("s1"), t.join("s2"), t.join("eval"));
    ok(omr(&["generate", "--config", s(&cfg), "--out", s(&data)]));
    ok(omr(&["train", "--config", s(&cfg), "--step", "1", "--data", s(&data), "--out", s(&s1)]));
    // 3 train clips × 4 frames in batches of 2, for 2 epochs.
    let log = std::fs::read_to_string(s1.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2 * 6);
    assert!(s1.join("run_config.json").is_file());

    ok(omr(&["train", "--config", s(&cfg), "--step", "2", "--data", s(&data), "--init", s(&s1), "--out", s(&s2)]));
    let p1 = read_json(&s1.join("checkpoint.json"));
    let p2 = read_json(&s2.join("checkpoint.json"));
    assert_eq!(p2["progress"]["stage"], "step2");
    assert_ne!(p1["params_sha256"], p2["params_sha256"]);

    ok(omr(&["eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&s2), "--out", s(&ev), "--render"]));
    let report = read_json(&ev.join("report.json"));
    for clip in report["clips"].as_array().unwrap() {
        let st = &clip["summary"]["stability"];
        let n = st["n"].as_u64().unwrap();
        assert_eq!(n, st["stable"].as_u64().unwrap() + st["flickering"].as_u64().unwrap() + st["missing"].as_u64().unwrap());
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for f in clip["frames"].as_array().unwrap() {
            tp += f["matches"].as_array().unwrap().len();
            fp += f["false_positives"].as_array().unwrap().len();
            fn_ += f["false_negatives"].as_array().unwrap().len();
        }
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        assert!((clip["summary"]["scores"]["f1"].as_f64().unwrap() - f1).abs() < 1e-12);
    }
    let first = report["clips"][0]["name"].as_str().unwrap();
    for name in ["overlay", "o", "f_tilde", "f", "p_tilde", "p"] {
        let p = ev.join("render").join(first).join(format!("frame000_{name}.ppm"));
        assert!(std::fs::read(&p).unwrap().starts_with(b"P6\n"), "{}", p.display());
    }

    let clip = data.join(first);
    let (i1, i2) = (t.join("i1"), t.join("i2"));
    ok(omr(&["infer", "--checkpoint", s(&s2), "--clip", s(&clip), "--out", s(&i1)]));
    ok(omr(&["infer", "--checkpoint", s(&s2), "--clip", s(&clip), "--out", s(&i2)]));
    let lanes = std::fs::read(i1.join("lanes.jsonl")).unwrap();
    assert_eq!(lanes, std::fs::read(i2.join("lanes.jsonl")).unwrap());
    let lines: Vec<Value> = String::from_utf8(lanes).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l["lanes"].as_array().unwrap().len() <= 8));
    let timing = read_json(&i1.join("timing.json"));
    let mut keys: Vec<&str> = timing["seconds_per_frame"].as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort();
    assert_eq!(keys, ["Decoding", "Encoding", "LOD", "OMR", "Total"]);

    let bad = t.join("bad.bin");
    std::fs::write(&bad, b"not a tensor").unwrap();
    assert_eq!(code(&omr(&["infer", "--checkpoint", s(&s2), "--clip", s(&bad), "--out", s(&t.join("i3"))])), 5);
    assert_eq!(code(&omr(&["infer", "--checkpoint", s(&s2), "--clip", s(&t.join("nope")), "--out", s(&t.join("i3"))])), 5);

    // A dataset with other shapes does not fit the checkpoint.
    let other = t.join("other");
    let mut c = read_json(&cfg);
    c["dataset"]["n_rows"] = json!(10);
    let other_cfg = t.join("other.json");
    std::fs::write(&other_cfg, serde_json::to_vec(&c).unwrap()).unwrap();
    ok(omr(&["generate", "--config", s(&other_cfg), "--out", s(&other)]));
    let o = omr(&["eval", "--data", s(&other), "--checkpoint", s(&s2), "--out", s(&t.join("e2"))]);
    assert_eq!(code(&o), 4);
}

#[test]
fn resumed_training_writes_the_same_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(t);
    let data = t.join("data");
    ok(omr(&["generate", "--config", s(&cfg), "--out", s(&data)]));
    let (full, part) = (t.join("full"), t.join("part"));
    ok(omr(&["train", "--config", s(&cfg), "--step", "1", "--data", s(&data), "--out", s(&full)]));
    ok(omr(&["train", "--config", s(&cfg), "--step", "1", "--epochs", "1", "--data", s(&data), "--out", s(&part)]));
    ok(omr(&["train", "--config", s(&cfg), "--step", "1", "--data", s(&data), "--resume", s(&part), "--out", s(&part)]));
    for f in ["params.bin", "optimizer.bin", "checkpoint.json", "loss_log.jsonl"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn rerun_from_saved_config_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(t);
    let data = t.join("data");
    ok(omr(&["generate", "--config", s(&cfg), "--out", s(&data)]));
    let a = t.join("a");
    ok(omr(&["train", "--config", s(&cfg), "--step", "1", "--data", s(&data), "--out", s(&a), "--epochs", "1"]));
    let saved = t.join("saved.json");
    std::fs::copy(a.join("run_config.json"), &saved).unwrap();
    let b = t.join("b");
    ok(omr(&["train", "--config", s(&saved), "--step", "1", "--out", s(&b)]));
    assert_eq!(std::fs::read(a.join("params.bin")).unwrap(), std::fs::read(b.join("params.bin")).unwrap());
}

#[test]
fn output_root_applies_to_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = Command::new(env!("CARGO_BIN_EXE_omr"))
        .args(["generate", "--config", s(&cfg), "--out", "rel", "--train-clips", "1", "--test-clips", "1"])
        .env("OMR_OUTPUT_ROOT", tmp.path())
        .output()
        .unwrap();
    ok(o);
    assert!(tmp.path().join("rel").join("manifest.json").is_file());
}

#[test]
fn ablate_writes_comparable_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(t);
    let data = t.join("data");
    ok(omr(&["generate", "--config", s(&cfg), "--out", s(&data)]));
    let out = t.join("abl");
    ok(omr(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--variants", "no-augmentation,no-obstacle-mask,no-memory,full"]));
    let hashes: Vec<Value> = ["intra", "no-augmentation", "no-obstacle-mask", "no-memory", "full"]
        .iter()
        .map(|v| read_json(&out.join("seed-1").join(v).join("report.json"))["dataset_sha256"].clone())
        .collect();
    assert!(hashes.iter().all(|h| h == &hashes[0]));
    let summary = read_json(&out.join("ablation.json"));
    assert_eq!(summary["means"].as_array().unwrap().len(), 5);
    assert_eq!(code(&omr(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--variants", "bogus"])), 2);
}
