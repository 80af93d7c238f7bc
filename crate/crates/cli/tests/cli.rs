mod common;

use std::fs;
use std::time::Instant;

use common::{blobs_csv, ok, read_json, run, schema, train, validate};
use quce_core::attribution::{path_attribution, RiemannConfig};
use quce_core::data::{load_csv, prepare};
use quce_core::generator::{generate_counterfactual, path_seed, GeneratorConfig};
use quce_core::{Classifier, Vae};
use serde_json::Value;

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn attributions(doc: &Value) -> Vec<f64> {
    doc["attributions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["attribution"].as_f64().unwrap())
        .collect()
}

#[test]
fn train_writes_models_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let csv = blobs_csv(dir.path(), 300, 2, 3);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let ta = train(&a, &csv, "label", 9);
    let tb = train(&b, &csv, "label", 9);
    assert_eq!(fs::read(&ta.classifier).unwrap(), fs::read(&tb.classifier).unwrap());
    assert_eq!(fs::read(&ta.vae).unwrap(), fs::read(&tb.vae).unwrap());
    let sidecar = read_json(&a.join("classifier.metrics.json"));
    validate(&sidecar, &schema("train_metrics"), "$").unwrap();
    assert!(sidecar["classifier"]["test_accuracy"].as_f64().unwrap() >= 0.95);
    for p in [&ta.classifier, &ta.vae] {
        validate(&read_json(p), &schema("model"), "$").unwrap();
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let out = run(&["train", "--data", "x.csv", "--out-classifier", "a", "--out-vae", "b"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["explain", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = run(&[
        "train",
        "--data",
        missing.to_str().unwrap(),
        "--label",
        "y",
        "--out-classifier",
        "a",
        "--out-vae",
        "b",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn explain_flags_and_documents() {
    let dir = tempfile::tempdir().unwrap();
    let csv = blobs_csv(dir.path(), 300, 2, 4);
    let t = train(dir.path(), &csv, "label", 4);
    let base = t.args("label", 4);
    let out = dir.path().join("e.json");
    let svg = dir.path().join("e.svg");
    let mut args = vec!["explain".to_string()];
    args.extend(base.clone());
    args.extend(["--instance", "2", "--out"].map(String::from));
    args.push(out.display().to_string());
    args.push("--svg".into());
    args.push(svg.display().to_string());
    ok(&strs(&args));
    let doc = read_json(&out);
    validate(&doc, &schema("explanation"), "$").unwrap();
    assert_eq!(doc["valid"], Value::Bool(true));
    assert!(doc["completeness_gap"].as_f64().unwrap() <= 5e-3);
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["feature_names"].as_array().unwrap().len(), 2);

    // Original units round-trip against the normalised internals.
    let data = load_csv::<f64>(&csv, "label").unwrap();
    let (_, _, norm) = prepare(&data, 0.8, 4).unwrap();
    for (o, n) in [
        ("origin", "origin_normalized"),
        ("counterfactual", "counterfactual_normalized"),
    ] {
        let back = norm.transform(&floats(&doc[o]));
        for (a, b) in back.iter().zip(floats(&doc[n])) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    // Same flags give the same bytes, SVG included.
    let svg_a = fs::read(&svg).unwrap();
    let json_a = fs::read(&out).unwrap();
    ok(&strs(&args));
    assert_eq!(fs::read(&svg).unwrap(), svg_a);
    assert_eq!(fs::read(&out).unwrap(), json_a);
    let text = String::from_utf8(svg_a).unwrap();
    assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    assert_eq!(text.matches("<circle").count(), 2);

    // QUCE_SEED stands in for --seed.
    let mut no_seed: Vec<String> = args.clone();
    let i = no_seed.iter().position(|a| a == "--seed").unwrap();
    no_seed.drain(i..i + 2);
    let out2 = common::bin().args(&no_seed).env("QUCE_SEED", "4").output().unwrap();
    assert!(out2.status.success());
    assert_eq!(fs::read(&out).unwrap(), json_a);

    // Inline instance in original units.
    let origin: Vec<String> = floats(&doc["origin"]).iter().map(|v| v.to_string()).collect();
    let mut inline = vec!["explain".to_string()];
    inline.extend(base.clone());
    inline.extend(["--instance".to_string(), origin.join(",")]);
    let printed: Value = serde_json::from_slice(&ok(&strs(&inline)).stdout).unwrap();
    assert_eq!(printed["counterfactual"], doc["counterfactual"]);
    assert_eq!(printed["instance"]["index"], Value::Null);
}

#[test]
fn degenerate_lambda_keeps_the_instance() {
    let dir = tempfile::tempdir().unwrap();
    let csv = blobs_csv(dir.path(), 300, 2, 5);
    let t = train(dir.path(), &csv, "label", 5);
    let mut args = vec!["explain".to_string()];
    args.extend(t.args("label", 5));
    args.extend(["--instance", "1", "--lambda1", "0", "--lambda3", "0"].map(String::from));
    let doc: Value = serde_json::from_slice(&ok(&strs(&args)).stdout).unwrap();
    let x = floats(&doc["origin_normalized"]);
    let xc = floats(&doc["counterfactual_normalized"]);
    let d: f64 = x.iter().zip(&xc).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    assert!(d <= 1e-3);
    assert!(attributions(&doc).iter().all(|a| a.abs() <= 1e-3));
    assert_eq!(doc["valid"], Value::Bool(false));
}

#[test]
fn exquce_averages_the_seeded_single_paths() {
    let dir = tempfile::tempdir().unwrap();
    let csv = blobs_csv(dir.path(), 300, 2, 6);
    let t = train(dir.path(), &csv, "label", 6);
    let mut args = vec!["explain".to_string()];
    args.extend(t.args("label", 6));
    args.extend(["--instance", "3", "--method", "exquce", "--k", "5"].map(String::from));
    let doc: Value = serde_json::from_slice(&ok(&strs(&args)).stdout).unwrap();
    assert_eq!(doc["paths"], 5);

    let clf = Classifier::load(&t.classifier).unwrap();
    let vae = Vae::load(&t.vae).unwrap();
    let data = load_csv::<f64>(&csv, "label").unwrap();
    let (_, test, _) = prepare(&data, 0.8, 6).unwrap();
    let x = test.row(3);
    let tau = 1 - clf.predict(x).unwrap();
    let mut mean = vec![0.0; 2];
    for i in 0..5 {
        let cfg = GeneratorConfig::default().with_seed(path_seed(6, i)).with_jitter(0.1);
        let r = generate_counterfactual(x, tau, &cfg, &clf, &vae).unwrap();
        let e = path_attribution(&r.path, &clf, tau, &RiemannConfig::default()).unwrap();
        for j in 0..2 {
            mean[j] += e.attributions[j];
        }
    }
    for (a, m) in attributions(&doc).iter().zip(&mean) {
        assert!((a - m / 5.0).abs() <= 1e-12);
    }
}

#[test]
fn every_instance_gets_a_document() {
    let dir = tempfile::tempdir().unwrap();
    let csv = blobs_csv(dir.path(), 60, 2, 8);
    let t = train(dir.path(), &csv, "label", 8);
    let mut args = vec!["explain".to_string()];
    args.extend(t.args("label", 8));
    args.extend(["--instance", "all", "--iters", "5", "--riemann-k", "50"].map(String::from));
    let docs: Value = serde_json::from_slice(&ok(&strs(&args)).stdout).unwrap();
    let docs = docs.as_array().unwrap();
    assert_eq!(docs.len(), 12);
    for (i, d) in docs.iter().enumerate() {
        validate(d, &schema("explanation"), "$").unwrap();
        assert_eq!(d["instance"]["index"], i);
    }
    assert!(docs.iter().any(|d| d["valid"] == Value::Bool(false)));
}

#[test]
fn explain_rejects_bad_instances() {
    let dir = tempfile::tempdir().unwrap();
    let csv = blobs_csv(dir.path(), 100, 2, 2);
    let t = train(dir.path(), &csv, "label", 2);
    for bad in ["500", "1,2,3", "abc"] {
        let mut args = vec!["explain".to_string()];
        args.extend(t.args("label", 2));
        args.extend(["--instance".to_string(), bad.to_string()]);
        assert_eq!(run(&strs(&args)).status.code(), Some(2), "{bad}");
    }
    // A model trained on a different feature count.
    let other = dir.path().join("other");
    fs::create_dir_all(&other).unwrap();
    let csv3 = blobs_csv(&other, 100, 3, 2);
    let mut args = vec!["explain".to_string()];
    args.extend(t.args("label", 2));
    let i = args.iter().position(|a| a == "--data").unwrap();
    args[i + 1] = csv3.display().to_string();
    assert_eq!(run(&strs(&args)).status.code(), Some(1));
}

#[test]
fn evaluate_quick_mode() {
    let dir = tempfile::tempdir().unwrap();
    let csv = blobs_csv(dir.path(), 300, 2, 10);
    let t = train(dir.path(), &csv, "label", 10);
    let report = dir.path().join("report.json");
    let mut args = vec!["evaluate".to_string()];
    args.extend(t.args("label", 10));
    args.extend(["--instances", "10", "--out"].map(String::from));
    args.push(report.display().to_string());
    let start = Instant::now();
    ok(&strs(&args));
    assert!(start.elapsed().as_secs() < 60);
    let first = fs::read(&report).unwrap();
    let table = fs::read_to_string(report.with_extension("txt")).unwrap();
    ok(&strs(&args));
    assert_eq!(fs::read(&report).unwrap(), first);
    let doc = read_json(&report);
    validate(&doc, &schema("metric_report"), "$").unwrap();
    assert_eq!(doc["rows"].as_array().unwrap().len(), 8);
    assert!(doc["rows"].as_array().unwrap().iter().all(|r| r["instances"] == 10));
    let header = table.lines().next().unwrap();
    for col in [
        "method",
        "split",
        "path uncertainty",
        "cf VAE loss",
        "recon. error",
        "deletion",
    ] {
        assert!(header.contains(col));
    }
}
