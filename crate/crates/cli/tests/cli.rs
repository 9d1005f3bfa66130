use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_causal-voxel"));
    c.env_remove("CAUSAL_VOXEL_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SUBCOMMANDS: [&str; 10] = [
    "simulate",
    "train-scm",
    "eval-loglik",
    "sample-dataset",
    "fit-regression",
    "invert",
    "counterfactual",
    "eval-volumes",
    "metrics",
    "serve",
];

#[test]
fn every_subcommand_has_help() {
    for sub in SUBCOMMANDS {
        let out = run(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("--seed") && text.contains("--threads"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "--frobnicate"]).status.code(), Some(2));
    // missing required output
    let out = run(&["simulate", "--n", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    // intervention outside the variable's bounds
    let img = dir.path().join("x.nii");
    let out = run(&["counterfactual", "--image", p(&img), "--set", "mmse=40", "--out", p(&dir.path().join("cf.nii"))]);
    assert_eq!(out.status.code(), Some(2));
    // unknown config key
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    let out = run(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("s.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    // runtime failure: missing input file
    let out = run(&["invert", "--image", p(&img), "--out", p(&dir.path().join("l.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_and_evaluate_the_scm() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    let test = dir.path().join("test.csv");
    ok(&["simulate", "--n", "400", "--seed", "1", "--out", p(&train)]);
    ok(&["simulate", "--n", "200", "--seed", "2", "--out", p(&test)]);
    let header = std::fs::read_to_string(&train).unwrap();
    assert!(header.starts_with("age,sex,mmse,"), "{}", &header[..40]);

    let scm = dir.path().join("scm.json");
    let args = ["train-scm", "--data", p(&train), "--out", p(&scm), "--epochs", "30", "--seed", "1"];
    ok(&args);
    let first = std::fs::read(&scm).unwrap();
    let history = std::fs::read_to_string(dir.path().join("scm.json.history.csv")).unwrap();
    assert!(history.starts_with("target,epoch,train_nll,validation_nll\n"));
    assert!(history.lines().count() > 30);
    let echo = json(&dir.path().join("scm.json.config.json"));
    assert_eq!(echo["command"], "train-scm");
    assert_eq!(echo["config"]["train"]["epochs"], 30);
    assert_eq!(echo["config"]["seed"], 1);

    // same argv, same inputs, same seed: identical artifacts
    ok(&args);
    assert_eq!(std::fs::read(&scm).unwrap(), first);

    let flow = dir.path().join("flow.json");
    ok(&["train-scm", "--data", p(&train), "--out", p(&flow), "--kind", "flow", "--epochs", "20"]);
    assert_eq!(run(&["train-scm", "--data", p(&train), "--out", p(&flow), "--kind", "gp"]).status.code(), Some(2));

    let table = dir.path().join("loglik.csv");
    let out = ok(&[
        "eval-loglik",
        "--data",
        p(&test),
        "--model",
        &format!("affine={}", p(&scm)),
        "--model",
        &format!("flow={}", p(&flow)),
        "--with-reference",
        "--out",
        p(&table),
    ]);
    let csv = std::fs::read_to_string(&table).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("affine"));
}

#[test]
fn cohort_counterfactual_and_volume_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cohort");
    let cfg = dir.path().join("sample.json");
    // flag beats config file beats default
    std::fs::write(&cfg, r#"{"n": 5, "seed": 3}"#).unwrap();
    ok(&["sample-dataset", "--config", p(&cfg), "--n", "4", "--out", p(&data)]);
    let echo = json(&data.join("config.json"));
    assert_eq!((echo["config"]["n"].as_u64(), echo["config"]["seed"].as_u64()), (Some(4), Some(3)));
    let manifest = data.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("sub-")).count(), 4);

    let reg = dir.path().join("reg.json");
    ok(&["fit-regression", "--n", "60", "--seed", "5", "--out", p(&reg)]);

    let image = data.join("images/sub-0000.nii");
    let cf = dir.path().join("cf.nii");
    let args = [
        "counterfactual",
        "--image",
        p(&image),
        "--set",
        "mmse=30",
        "--reg",
        p(&reg),
        "--out",
        p(&cf),
    ];
    let out = ok(&args);
    assert!(String::from_utf8_lossy(&out.stdout).contains("SSIM"));
    let audit = json(&dir.path().join("cf.nii.audit.json"));
    assert_eq!(audit["counterfactual"]["mmse"], 30.0);
    assert_eq!(audit["w_hat"].as_array().unwrap().len(), 8);
    assert!(audit["measured_counterfactual"]["ventricle"].as_f64().unwrap() > 0.0);
    let first = std::fs::read(&cf).unwrap();
    ok(&args);
    assert_eq!(std::fs::read(&cf).unwrap(), first);

    let latent = dir.path().join("latent.json");
    let noise = dir.path().join("noise.nii");
    ok(&["invert", "--image", p(&image), "--out", p(&latent), "--noise", p(&noise)]);
    assert!(json(&latent)["l1_error"].as_f64().unwrap() < 2e-3);
    assert!(noise.exists());

    let table = dir.path().join("table3.csv");
    let out = bin()
        .args([
            "eval-volumes",
            "--manifest",
            p(&manifest),
            "--settings",
            "-15,-5,5,15",
            "--n",
            "2",
            "--reg",
            p(&reg),
            "--out",
            p(&table),
        ])
        .env("CAUSAL_VOXEL_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&table).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("block,volume,-15%,-5%,+5%,+15%"));
    assert_eq!(csv.lines().count(), 7);
    assert!(dir.path().join("table3.json").exists());

    let report = dir.path().join("metrics.json");
    let scatter = dir.path().join("scatter.csv");
    ok(&[
        "metrics",
        "--manifest",
        p(&manifest),
        "--reference",
        p(&manifest),
        "--scatter",
        p(&scatter),
        "--out",
        p(&report),
    ]);
    let r = json(&report);
    let names: Vec<&str> = r["metrics"].as_array().unwrap().iter().map(|m| m["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"spearman_mmse_ventricle") && names.contains(&"bmmd2"));
    assert!(std::fs::read_to_string(&scatter).unwrap().starts_with("subject_id,mmse,ventricle_ml"));
}
