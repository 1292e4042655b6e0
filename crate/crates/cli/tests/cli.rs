use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cite"))
        .args(args)
        .env_remove("CITE_DATA_ROOT")
        .output()
        .expect("spawn cite")
}

fn ok_json(args: &[&str]) -> Value {
    let out = cite(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn synth(dir: &Path, per_class: usize) -> Value {
    ok_json(&[
        "synth",
        "--classes",
        "3",
        "--slides-per-class",
        &per_class.to_string(),
        "--seed",
        "4",
        "--out",
        dir.to_str().unwrap(),
    ])
}

fn train(data: &Path, out: &Path, policy: &str) -> Value {
    ok_json(&[
        "train",
        "--policy",
        policy,
        "--iterations",
        "3",
        "--shots",
        "1",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn synth_counts_and_refuses_to_overwrite() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let v = synth(&data, 10);
    assert_eq!(v["slides"], 30);
    assert_eq!(v["train_slides"], 6);
    assert_eq!(v["validation_slides"], 24);

    let again = cite(&["synth", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&again), 1);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let forced = cite(&["synth", "--slides-per-class", "10", "--seed", "4", "--force", "--out", data.to_str().unwrap()]);
    assert!(forced.status.success());
}

#[test]
fn zero_shot_cannot_be_trained() {
    let tmp = TempDir::new().unwrap();
    let out = cite(&["train", "--policy", "none", "--data", tmp.path().to_str().unwrap(), "--out", "x"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("use eval"));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(code(&cite(&["train", "--policy", "vpt"])), 1);
    assert_eq!(code(&cite(&["frobnicate"])), 1);
    assert_eq!(code(&cite(&["--help"])), 0);
}

#[test]
fn train_then_eval_reports_and_dumps() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let v = synth(&data, 4);
    let ckpt = tmp.path().join("ckpt");
    let t = train(&data, &ckpt, "cite");
    assert_eq!(t["train_slides"], 3);
    assert_eq!(t["trainable"]["trainable"], 1648);
    for f in ["checkpoint.ctns", "checkpoint.json", "train_log.jsonl"] {
        assert!(ckpt.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(ckpt.join("train_log.jsonl")).unwrap().lines().count(), 3);

    let dump = tmp.path().join("probs.ctns");
    let r = ok_json(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--dump-patch-probs",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(r["method"], "cite");
    assert_eq!(r["per_slide"].as_array().unwrap().len(), v["validation_slides"].as_u64().unwrap() as usize);
    let m = r["macro"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&m));

    let tensors = cite_core::ctns::read_ctns(&dump).unwrap();
    let (_, probs) = tensors.iter().find(|(n, _)| n == "probs").unwrap();
    let val = cite_core::data::SlideManifest::load(data.join("validation.json")).unwrap();
    let ds = cite_core::data::Dataset::open(&data, "validation.json").unwrap();
    assert_eq!(val.slides.len(), ds.num_slides());
    assert_eq!(probs.shape(), &[ds.total_patches(), 3]);
}

#[test]
fn zero_shot_eval_needs_no_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3);
    let cfg = tmp.path().join("zs.json");
    fs::write(&cfg, r#"{"text": {"d_l": 32}}"#).unwrap();
    let r = ok_json(&["eval", "--policy", "none", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(r["method"], "zero_shot");

    // the default text width differs from the image embedding width
    let out = cite(&["eval", "--policy", "none", "--data", data.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3);
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let ckpt = tmp.path().join(run);
        train(&data, &ckpt, "vpt_head");
        let out = cite(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
        assert!(out.status.success());
        reports.push(out.stdout);
    }
    assert_eq!(reports[0], reports[1]);
    for f in ["checkpoint.ctns", "checkpoint.json", "train_log.jsonl"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn corrupt_checkpoint_exits_three() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3);
    let ckpt = tmp.path().join("ckpt");
    train(&data, &ckpt, "linear");
    let file = ckpt.join("checkpoint.ctns");
    let good = fs::read(&file).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let truncated = good[..good.len() - 5].to_vec();
    // grow the first dimension of the last tensor so its payload runs short
    let tensors = cite_core::ctns::decode(&good).unwrap();
    let last = &tensors.last().unwrap().1;
    let first_dim = good.len() - 4 * last.numel() - 4 * last.rank();
    let mut grown = good.clone();
    grown[first_dim] += 1;
    for (what, bytes) in [("magic", bad_magic), ("truncation", truncated), ("dims", grown)] {
        fs::write(&file, bytes).unwrap();
        let out = cite(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
        assert_eq!(code(&out), 3, "{what}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn gradcheck_passes_and_catches_a_wrong_rule() {
    let v = ok_json(&["gradcheck"]);
    assert_eq!(v["pass"], true);
    assert_eq!(v["checks"].as_array().unwrap().len(), 5);
    let bad = cite(&["gradcheck", "--corrupt-backward"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn ablation_writes_the_grid() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("grid");
    let v = ok_json(&[
        "ablate",
        "--shots",
        "1",
        "--seeds",
        "1",
        "--slides-per-class",
        "5",
        "--iterations",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    let runs = v["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0]["cells"].as_object().unwrap().len(), 4);
    let saved: Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(saved, v);
}
