use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn patchopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchopt")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth_dir(dir: &Path, id: &str, semi_axis: &str, lesions: &str, seed: &str) -> Value {
    let out = patchopt(&[
        "synth", "--out", dir.to_str().unwrap(), "--id", id, "--count", "3", "--lesions", lesions, "--semi-axis", semi_axis,
        "--grid", "48,48,24", "--seed", seed,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    json(&out)
}

fn stats_report(dir: &Path, id: &str, into: &Path) {
    let out = patchopt(&["stats", dir.to_str().unwrap(), "--dataset-id", id]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    std::fs::write(into, &out.stdout).unwrap();
}

#[test]
fn select_exact_cube() {
    let out = patchopt(&["select", "--volume-mm3", "4096", "--unit-mode", "voxel-edge", "--spacing", "1,1,1"]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["decision"]["selected"], 16);
    assert_eq!(v["decision"]["target_edge"], 16.0);
    assert_eq!(v["unit_mode"]["mode"], "voxel-edge");
    assert!(v["reference"]["datasets"].is_array());
}

#[test]
fn select_published_means_with_literal_scale() {
    for (volume, want) in [("17560", 16), ("10420", 12)] {
        let out = patchopt(&["select", "--volume-mm3", volume, "--unit-mode", "paper-literal", "--scale-s", "0.2"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert_eq!(json(&out)["decision"]["selected"], want);
    }
}

#[test]
fn select_rejects_bad_volume() {
    assert_eq!(code(&patchopt(&["select", "--volume-mm3", "-1"])), 2);
    assert_eq!(code(&patchopt(&["select"])), 2);
    assert_eq!(code(&patchopt(&["select", "--volume-mm3", "100", "--unit-mode", "paper-literal"])), 2);
}

#[test]
fn stats_match_sidecar_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let sidecars = synth_dir(dir.path(), "scan", "3,6", "2", "4");
    let out = patchopt(&["stats", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(&out);
    let mut all: Vec<f64> = Vec::new();
    for s in sidecars.as_array().unwrap() {
        all.extend(s["lesions"].as_array().unwrap().iter().map(|l| l["rasterized_volume_mm3"].as_f64().unwrap()));
    }
    let expected = all.iter().sum::<f64>() / all.len() as f64;
    let got = report["dataset_mean_volume_mm3"].as_f64().unwrap();
    assert!((got - expected).abs() <= 1e-9 * expected, "{got} vs {expected}");
    assert_eq!(report["per_scan"].as_array().unwrap().len(), 3);
    assert_eq!(report["aggregation_mode"], "per-lesion");
}

#[test]
fn stats_empty_dir_is_no_scans() {
    let dir = tempfile::tempdir().unwrap();
    let out = patchopt(&["stats", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("NoScans"));
}

#[test]
fn stats_fails_fast_on_any_bad_file() {
    let dir = tempfile::tempdir().unwrap();
    synth_dir(dir.path(), "scan", "3,5", "1", "1");
    std::fs::write(dir.path().join("broken.nii"), b"not a volume").unwrap();
    let out = patchopt(&["stats", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("broken.nii"));
    assert!(out.stdout.is_empty());
}

#[test]
fn plan_pretrains_on_larger_lesions() {
    let dir = tempfile::tempdir().unwrap();
    let (big, small) = (dir.path().join("big"), dir.path().join("small"));
    synth_dir(&big, "b", "6,8", "2", "1");
    synth_dir(&small, "s", "2,3", "3", "2");
    let (big_json, small_json) = (dir.path().join("big.json"), dir.path().join("small.json"));
    stats_report(&big, "lits-like", &big_json);
    stats_report(&small, "mcrc-like", &small_json);
    let out = patchopt(&["plan", small_json.to_str().unwrap(), big_json.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = json(&out);
    assert_eq!(v["plan"]["pretrain_on"], "lits-like");
    assert_eq!(v["plan"]["finetune_on"][0], "mcrc-like");

    let one = patchopt(&["plan", big_json.to_str().unwrap()]);
    assert_eq!(code(&one), 2);
}

#[test]
fn plan_equal_means_orders_by_id() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    synth_dir(&data, "x", "3,4", "2", "7");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    stats_report(&data, "zeta", &a);
    stats_report(&data, "alpha", &b);
    let v = json(&patchopt(&["plan", a.to_str().unwrap(), b.to_str().unwrap()]));
    assert_eq!(v["plan"]["pretrain_on"], "alpha");
}

#[test]
fn gradchecks_pass_and_detect_perturbation() {
    let ok = patchopt(&["gradcheck", "--config", "tiny", "--seed", "1", "--tolerance", "1e-4"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(json(&ok)["report"]["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert_eq!(code(&patchopt(&["gradcheck", "--config", "tiny", "--perturb-grad"])), 1);
    assert_eq!(code(&patchopt(&["gradcheck", "--config", "base"])), 2);
    assert_eq!(code(&patchopt(&["gradcheck-loss", "--cases", "10"])), 0);
    assert_eq!(code(&patchopt(&["gradcheck-loss", "--cases", "10", "--perturb-grad"])), 1);
}

#[test]
fn verify_suite_and_negative_control() {
    let out = patchopt(&["verify"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = json(&out);
    assert_eq!(v["all_passed"], true);
    let grad = v["checks"].as_array().unwrap().iter().find(|c| c["name"] == "vit_gradcheck").unwrap();
    assert!(grad["measured"].as_f64().unwrap() < 1e-4);

    assert_eq!(code(&patchopt(&["verify", "--perturb-grad"])), 1);

    let base = patchopt(&["verify", "--config", "base", "--geometry-only"]);
    assert_eq!(code(&base), 0, "{}", stderr(&base));
    assert!(json(&base)["checks"][0]["detail"].as_str().unwrap().contains("N = 1536"));
}

#[test]
fn tokenize_then_forward_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = patchopt(&["synth", "--out", d.to_str().unwrap(), "--id", "p", "--grid", "32,32,16", "--lesions", "2", "--semi-axis", "2,4"]);
    assert_eq!(code(&synth), 0, "{}", stderr(&synth));
    let tokens = d.join("p.ptok");
    let tok = patchopt(&[
        "tokenize", "--input", d.join("p.nii").to_str().unwrap(), "--patch", "8", "--output", tokens.to_str().unwrap(),
        "--embed-dim", "8", "--seed", "2",
    ]);
    assert_eq!(code(&tok), 0, "{}", stderr(&tok));
    assert_eq!(json(&tok)["token_count"], 32);
    let run = || patchopt(&["forward", "--config", "tiny", "--seed", "5", "--tokens", tokens.to_str().unwrap()]);
    let (a, b) = (run(), run());
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(json(&a)["tokens"], 32);
}

#[test]
fn config_file_is_strict_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"unit_mode": "paper-literal", "scale_s": 0.2}"#).unwrap();
    let c = cfg.to_str().unwrap();
    let v = json(&patchopt(&["--config-file", c, "select", "--volume-mm3", "17560"]));
    assert_eq!(v["unit_mode"]["mode"], "paper-literal");
    assert_eq!(v["decision"]["selected"], 16);
    let v = json(&patchopt(&["--config-file", c, "select", "--volume-mm3", "17560", "--unit-mode", "voxel-edge"]));
    assert_eq!(v["unit_mode"]["mode"], "voxel-edge");
    assert_eq!(v["decision"]["selected"], 24);

    std::fs::write(&cfg, r#"{"unit_mode": "voxel-edge", "patch": 16}"#).unwrap();
    assert_eq!(code(&patchopt(&["--config-file", c, "verify", "--geometry-only"])), 2);
}
