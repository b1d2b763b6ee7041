//! End-to-end command tests driving the installed binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_posegraph"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("posegraph_cli_{}_{}", name, std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_is_byte_deterministic() {
    let a = tmp("gen_a");
    let b = tmp("gen_b");
    for out in [&a, &b] {
        let st = bin()
            .args(["gen", "--out"])
            .arg(out)
            .args(["--seed", "9", "--set", "gen.count=4", "--set", "gen.distractors=1"])
            .status()
            .unwrap();
        assert!(st.success());
    }
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    std::fs::remove_dir_all(&a).unwrap();
    std::fs::remove_dir_all(&b).unwrap();
}

#[test]
fn gen_count_zero_still_writes_manifest() {
    let out = tmp("gen_zero");
    let st = bin()
        .args(["gen", "--out"])
        .arg(&out)
        .args(["--set", "gen.count=0"])
        .status()
        .unwrap();
    assert!(st.success());
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"command\": \"gen\""));
    let ann = std::fs::read_to_string(out.join("annotations.jsonl")).unwrap();
    assert_eq!(ann.lines().count(), 1); // header only
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn selftest_passes_and_sabotage_fails() {
    let ok = bin().arg("selftest").status().unwrap();
    assert!(ok.success());
    let bad = bin()
        .arg("selftest")
        .env("POSEGRAPH_SELFTEST_SABOTAGE_FFT", "1")
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let text = String::from_utf8_lossy(&bad.stdout);
    assert!(text.contains("fft-vs-direct convolution ... FAIL"), "{text}");
}

#[test]
fn unknown_command_and_bad_key_fail_cleanly() {
    let st = bin().arg("frobnicate").output().unwrap();
    assert!(!st.status.success());
    let st = bin()
        .args(["gen", "--set", "gen.bogus=1"])
        .output()
        .unwrap();
    assert!(!st.status.success());
    assert!(String::from_utf8_lossy(&st.stderr).contains("unknown config key"));
}

fn gen_dataset(dir: &Path, count: usize, distractors: usize, seed: u64) {
    let st = bin()
        .args(["gen", "--out"])
        .arg(dir)
        .args([
            "--seed",
            &seed.to_string(),
            "--set",
            &format!("gen.count={count}"),
            "--set",
            &format!("gen.distractors={distractors}"),
        ])
        .status()
        .unwrap();
    assert!(st.success());
}

fn train_args(data: &Path, out: &Path, epochs: (usize, usize, usize)) -> Vec<String> {
    vec![
        "train".into(),
        "--out".into(),
        out.display().to_string(),
        "--seed".into(),
        "3".into(),
        "--set".into(),
        format!("train.dataset={}", data.display()),
        "--set".into(),
        format!("train.epochs1={}", epochs.0),
        "--set".into(),
        format!("train.epochs2={}", epochs.1),
        "--set".into(),
        format!("train.epochs3={}", epochs.2),
        "--set".into(),
        "train.batch=4".into(),
        "--set".into(),
        "detector.banks=1".into(),
    ]
}

#[test]
fn train_zero_epochs_writes_models_and_empty_metrics() {
    let data = tmp("train0_data");
    gen_dataset(&data, 6, 0, 2);
    let out = tmp("train0_out");
    let st = bin().args(train_args(&data, &out, (0, 0, 0))).status().unwrap();
    assert!(st.success());
    for f in ["detector.model", "spatial.model", "unified.model", "metrics.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1); // header only
    std::fs::remove_dir_all(&data).unwrap();
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn train_resumes_from_stage_artifacts_and_refuses_config_mismatch() {
    let data = tmp("resume_data");
    gen_dataset(&data, 6, 0, 4);
    let out = tmp("resume_out");
    let st = bin().args(train_args(&data, &out, (1, 1, 1))).status().unwrap();
    assert!(st.success());
    let detector_before = std::fs::read(out.join("detector.model")).unwrap();
    let spatial_before = std::fs::read(out.join("spatial.model")).unwrap();

    // same config: resumes, stages 1-2 not retrained (artifact bytes intact)
    let rerun = bin().args(train_args(&data, &out, (1, 1, 1))).output().unwrap();
    assert!(rerun.status.success());
    let text = String::from_utf8_lossy(&rerun.stdout);
    assert!(text.contains("skipping detector training"), "{text}");
    assert!(text.contains("skipping spatial training"), "{text}");
    assert_eq!(std::fs::read(out.join("detector.model")).unwrap(), detector_before);
    assert_eq!(std::fs::read(out.join("spatial.model")).unwrap(), spatial_before);

    // changed config hash: refuse to touch the directory
    let st = bin().args(train_args(&data, &out, (2, 1, 1))).output().unwrap();
    assert!(!st.status.success());
    assert!(String::from_utf8_lossy(&st.stderr).contains("refusing to resume"));
    std::fs::remove_dir_all(&data).unwrap();
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn eval_writes_curves() {
    let data = tmp("eval_data");
    gen_dataset(&data, 6, 0, 5);
    let out = tmp("eval_train");
    let st = bin().args(train_args(&data, &out, (0, 0, 0))).status().unwrap();
    assert!(st.success());
    let eout = tmp("eval_out");
    let st = bin()
        .args(["eval", "--out"])
        .arg(&eout)
        .args([
            "--set",
            &format!("eval.dataset={}", data.display()),
            "--set",
            &format!("eval.model={}", out.join("detector.model").display()),
            "--set",
            "eval.radii=0.25,0.5",
            "--set",
            "eval.tag=unary",
        ])
        .status()
        .unwrap();
    assert!(st.success());
    let (curve, tag) = posegraph::eval::read_curves(&eout.join("curves.csv")).unwrap();
    assert_eq!(tag, "unary");
    assert_eq!(curve.radii, vec![0.25, 0.5]);
    assert_eq!(curve.joint_names.len(), 7);
    for dir in [&data, &out, &eout] {
        std::fs::remove_dir_all(dir).unwrap();
    }
}

#[test]
fn infer_heat_dump_is_consistent_with_reported_joints() {
    let data = tmp("infer_data");
    gen_dataset(&data, 2, 0, 6);
    let out = tmp("infer_train");
    let st = bin().args(train_args(&data, &out, (0, 0, 0))).status().unwrap();
    assert!(st.success());
    let iout = tmp("infer_out");
    let dump = iout.join("heat.pgrf");
    let st = bin()
        .args(["infer", "--out"])
        .arg(&iout)
        .args([
            "--set",
            &format!("infer.model={}", out.join("detector.model").display()),
            "--set",
            &format!("infer.image={}", data.join("images/img_00000.pgm").display()),
            "--set",
            &format!("infer.dump_heat={}", dump.display()),
        ])
        .output()
        .unwrap();
    assert!(st.status.success());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(iout.join("infer.json")).unwrap()).unwrap();
    let joints = json["joints"].as_array().unwrap();
    assert_eq!(joints.len(), 7);

    // reloading the dump and taking the argmax reproduces the reported (u,v)
    let (header, tensors) = posegraph::model_io::load_tensors(&dump).unwrap();
    let stride: usize = posegraph::model_io::header_get(&header, "stride")
        .unwrap()
        .parse()
        .unwrap();
    let hm = posegraph::detector::HeatMapSet {
        maps: tensors[0].clone(),
        stride,
    };
    let preds = posegraph::detector::extract_joints(&hm).unwrap();
    for (j, p) in joints.iter().zip(preds.iter()) {
        assert_eq!(j["u"].as_f64().unwrap(), p.u);
        assert_eq!(j["v"].as_f64().unwrap(), p.v);
    }
    for dir in [&data, &out, &iout] {
        std::fs::remove_dir_all(dir).unwrap();
    }
}

#[test]
fn unified_infer_requires_torso_box() {
    let data = tmp("uinfer_data");
    gen_dataset(&data, 4, 0, 7);
    let out = tmp("uinfer_train");
    let st = bin().args(train_args(&data, &out, (0, 0, 0))).status().unwrap();
    assert!(st.success());
    let iout = tmp("uinfer_out");
    let image = data.join("images/img_00000.pgm");
    let model = out.join("unified.model");
    // without a torso box: a clear error
    let st = bin()
        .args(["infer", "--out"])
        .arg(&iout)
        .args([
            "--set",
            &format!("infer.model={}", model.display()),
            "--set",
            &format!("infer.image={}", image.display()),
        ])
        .output()
        .unwrap();
    assert!(!st.status.success());
    assert!(String::from_utf8_lossy(&st.stderr).contains("infer.torso"));
    // with one: success
    let st = bin()
        .args(["infer", "--out"])
        .arg(&iout)
        .args([
            "--set",
            &format!("infer.model={}", model.display()),
            "--set",
            &format!("infer.image={}", image.display()),
            "--set",
            "infer.torso=12,10,7,12",
        ])
        .status()
        .unwrap();
    assert!(st.success());
    for dir in [&data, &out, &iout] {
        std::fs::remove_dir_all(dir).unwrap();
    }
}
