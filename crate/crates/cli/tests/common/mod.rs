#![allow(dead_code)]

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quce_core::data::{synthetic_blobs, write_csv};
use serde_json::Value;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_quce"));
    c.env_remove("QUCE_SEED").env("RUST_LOG", "error");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn quce")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "quce {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn wbc_csv() -> PathBuf {
    workspace().join("data/wbc.csv")
}

pub fn schema(name: &str) -> Value {
    let p = workspace().join(format!("docs/schemas/{name}.schema.json"));
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

pub fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

pub fn blobs_csv(dir: &Path, n: usize, j: usize, seed: u64) -> PathBuf {
    let data = synthetic_blobs::<f64>(n, j, 6.0, seed).unwrap();
    let p = dir.join("blobs.csv");
    write_csv(&data, File::create(&p).unwrap(), "label").unwrap();
    p
}

pub struct Trained {
    pub data: PathBuf,
    pub classifier: PathBuf,
    pub vae: PathBuf,
}

impl Trained {
    /// `--data --label --classifier --vae --seed` for explain and evaluate.
    pub fn args(&self, label: &str, seed: u64) -> Vec<String> {
        vec![
            "--data".into(),
            self.data.display().to_string(),
            "--label".into(),
            label.into(),
            "--classifier".into(),
            self.classifier.display().to_string(),
            "--vae".into(),
            self.vae.display().to_string(),
            "--seed".into(),
            seed.to_string(),
        ]
    }
}

pub fn train(dir: &Path, data: &Path, label: &str, seed: u64) -> Trained {
    let classifier = dir.join("classifier.json");
    let vae = dir.join("vae.json");
    ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--label",
        label,
        "--out-classifier",
        classifier.to_str().unwrap(),
        "--out-vae",
        vae.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
    ]);
    Trained {
        data: data.to_path_buf(),
        classifier,
        vae,
    }
}

/// Checks the JSON Schema keywords the shipped schemas use: type, const,
/// enum, required, properties, additionalProperties, items, minItems,
/// maxItems, minimum, maximum. Returns the first violation.
pub fn validate(value: &Value, schema: &Value, at: &str) -> Result<(), String> {
    let fail = |msg: String| Err(format!("{at}: {msg}"));
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        let matches = types.iter().any(|t| match *t {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            "number" => value.is_number(),
            "integer" => value.is_u64() || value.is_i64(),
            _ => false,
        });
        if !matches {
            return fail(format!("expected {types:?}, got {value}"));
        }
    }
    if let Some(c) = schema.get("const") {
        if c != value {
            return fail(format!("expected {c}, got {value}"));
        }
    }
    if let Some(Value::Array(options)) = schema.get("enum") {
        if !options.contains(value) {
            return fail(format!("{value} not in {options:?}"));
        }
    }
    if let Some(x) = value.as_f64() {
        if schema.get("minimum").and_then(Value::as_f64).is_some_and(|m| x < m) {
            return fail(format!("{x} below minimum"));
        }
        if schema.get("maximum").and_then(Value::as_f64).is_some_and(|m| x > m) {
            return fail(format!("{x} above maximum"));
        }
    }
    if let Value::Object(map) = value {
        if let Some(Value::Array(req)) = schema.get("required") {
            for r in req.iter().filter_map(Value::as_str) {
                if !map.contains_key(r) {
                    return fail(format!("missing '{r}'"));
                }
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        for (k, v) in map {
            match props.and_then(|p| p.get(k)) {
                Some(s) => validate(v, s, &format!("{at}.{k}"))?,
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return fail(format!("unexpected '{k}'"));
                }
                None => {}
            }
        }
    }
    if let Value::Array(items) = value {
        let len = items.len() as u64;
        if schema.get("minItems").and_then(Value::as_u64).is_some_and(|m| len < m) {
            return fail("too few items".into());
        }
        if schema.get("maxItems").and_then(Value::as_u64).is_some_and(|m| len > m) {
            return fail("too many items".into());
        }
        if let Some(s) = schema.get("items") {
            for (i, v) in items.iter().enumerate() {
                validate(v, s, &format!("{at}[{i}]"))?;
            }
        }
    }
    Ok(())
}
