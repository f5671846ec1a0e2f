use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn discpower(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discpower"))
        .args(args)
        .args(["--threads", "1", "--reproducible"])
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = discpower(args);
    assert!(
        out.status.success(),
        "discpower {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn fails_with(args: &[&str], needles: &[&str]) {
    let out = discpower(args);
    assert!(!out.status.success(), "discpower {} unexpectedly succeeded", args.join(" "));
    let err = String::from_utf8_lossy(&out.stderr);
    for n in needles {
        assert!(err.contains(n), "stderr {err:?} lacks {n:?}");
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn dataset(dir: &Path, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    let mut args = vec!["synth", "--out", s(&data), "--samples", "24", "--categories", "3", "--channels", "6"];
    args.extend_from_slice(extra);
    ok(&args);
    data
}

#[test]
fn synth_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), &["--f32"]);
    let summary = json(data.join("summary_synth.json"));
    assert_eq!(summary["metrics"]["samples"], 24);
    let counts: u64 = summary["metrics"]["label_counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, 24);
    for f in summary["output_files"].as_array().unwrap() {
        assert!(data.join(f.as_str().unwrap()).is_file(), "{f} listed but missing");
    }
    let manifest = discpower::io::Manifest::load(&data.join("manifest.json")).unwrap();
    assert_eq!(manifest.load_sample_batch().unwrap().len(), 24);
    assert_eq!(manifest.load_layer("conv_2").unwrap().len(), 24);
}

#[test]
fn downstream_commands_need_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), &[]);
    let m = data.join("manifest.json");
    let out = dir.path().join("run");
    fails_with(&["fit-region", "--manifest", s(&m), "--out", s(&out)], &["missing upstream artifact", "fit-sample"]);
    fails_with(&["knowledge", "--manifest", s(&m), "--out", s(&out)], &["missing upstream artifact", "fit-region"]);
}

#[test]
fn missing_logits_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), &[]);
    std::fs::remove_file(data.join("tensors/s00005_logits.ftc")).unwrap();
    let out = dir.path().join("run");
    fails_with(
        &["fit-sample", "--manifest", s(&data.join("manifest.json")), "--out", s(&out)],
        &["s00005"],
    );
}

#[test]
fn full_pipeline_and_paired_analyses() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), &["--perturb-layer", "conv_2"]);
    let m = data.join("manifest.json");
    let p = data.join("manifest_perturbed.json");
    let out = dir.path().join("run");
    ok(&["fit-sample", "--manifest", s(&m), "--out", s(&out)]);
    ok(&["fit-region", "--manifest", s(&m), "--out", s(&out)]);
    ok(&["knowledge", "--manifest", s(&m), "--out", s(&out), "--checkpoint", "epoch_1"]);

    let knowledge = json(out.join("summary_knowledge.json"));
    for (_, layer) in knowledge["metrics"]["layers"].as_object().unwrap() {
        assert_eq!(layer["tau_sweep_monotone"], true);
        assert!(layer["reliable"].as_u64() <= layer["total"].as_u64());
    }
    assert!(json(out.join("knowledge/curves.json"))["epoch_1"]["conv_3"]["total"].is_u64());

    // Identical conditions.
    let same = dir.path().join("same");
    std::fs::create_dir_all(&same).unwrap();
    for f in ["sample", "region"] {
        copy_tree(&out.join(f), &same.join(f));
    }
    ok(&["attack", "--manifest", s(&m), "--paired-manifest", s(&m), "--out", s(&same)]);
    for (_, u) in json(same.join("attack/utilities.json")).as_object().unwrap() {
        assert_eq!(u["delta_orientation"], 1.0);
        assert_eq!(u["delta_strength"], 0.0);
    }

    ok(&["attack", "--manifest", s(&m), "--paired-manifest", s(&p), "--out", s(&out)]);
    let summary = json(out.join("summary_attack.json"));
    assert_eq!(summary["metrics"]["largest_delta_strength_layer"], "conv_2");

    ok(&["distill", "--manifest", s(&m), "--paired-manifest", s(&p), "--out", s(&out)]);
    let report = json(out.join("distill/conv_2.json"));
    let total: u64 = report["orientation"]["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(total, report["pairs"].as_u64().unwrap());

    // Drop one sample from the paired manifest.
    let mut broken = json(p.clone());
    let dropped = broken["samples"].as_array_mut().unwrap().remove(3)["id"].as_str().unwrap().to_string();
    let broken_path = data.join("broken.json");
    std::fs::write(&broken_path, serde_json::to_string(&broken).unwrap()).unwrap();
    fails_with(
        &["attack", "--manifest", s(&m), "--paired-manifest", s(&broken_path), "--out", s(&out)],
        &["pairing", &dropped],
    );
}

fn copy_tree(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let path = entry.unwrap().path();
        let target = to.join(path.file_name().unwrap());
        if path.is_dir() {
            copy_tree(&path, &target);
        } else {
            std::fs::copy(&path, &target).unwrap();
        }
    }
}
