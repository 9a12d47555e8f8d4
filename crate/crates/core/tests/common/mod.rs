#![allow(dead_code)]

pub mod oracles;

use std::path::PathBuf;

use expertflow::model::ModelConfig;
use expertflow::synthdata::SynthConfig;
use serde_json::Value;

pub fn small_model() -> ModelConfig {
    ModelConfig {
        d: 16,
        blocks: 2,
        attn_heads: 2,
        expert_hidden: 16,
        k_init: 4,
        text_vocab: 16,
        max_frames: 8,
        max_target: 32,
        ..ModelConfig::default()
    }
}

pub fn small_data() -> SynthConfig {
    SynthConfig {
        n_classes: 3,
        frames: 8,
        dim: 16,
        min_events: 1,
        max_events: 2,
        saliency: vec![1, 4, 2],
        text_vocab: 16,
        min_duration: 1.0,
        max_duration: 3.0,
        train_size: 30,
        val_size: 9,
        ..SynthConfig::default()
    }
}

fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(format!("{name}.json"))
}

fn compare(path: &str, want: &Value, got: &Value, tol: f64) -> Result<(), String> {
    match (want, got) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            if (a - b).abs() <= tol {
                Ok(())
            } else {
                Err(format!("{path}: fixture {a} vs actual {b}"))
            }
        }
        (Value::Array(a), Value::Array(b)) => {
            if a.len() != b.len() {
                return Err(format!("{path}: length {} vs {}", a.len(), b.len()));
            }
            a.iter().zip(b).enumerate().try_for_each(|(i, (x, y))| compare(&format!("{path}[{i}]"), x, y, tol))
        }
        (Value::Object(a), Value::Object(b)) => {
            if a.len() != b.len() || a.keys().any(|k| !b.contains_key(k)) {
                return Err(format!("{path}: keys differ"));
            }
            a.iter().try_for_each(|(k, x)| compare(&format!("{path}.{k}"), x, &b[k], tol))
        }
        _ if want == got => Ok(()),
        _ => Err(format!("{path}: fixture {want} vs actual {got}")),
    }
}

/// Compares `actual` against the stored fixture with absolute tolerance
/// `tol` on numbers. `EXPERTFLOW_BLESS=1` rewrites the fixture instead.
pub fn golden(name: &str, actual: &Value, tol: f64) {
    let path = fixture_path(name);
    if std::env::var("EXPERTFLOW_BLESS").is_ok_and(|v| v == "1") {
        std::fs::write(&path, serde_json::to_string_pretty(actual).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing fixture {} ({e}); run with EXPERTFLOW_BLESS=1", path.display()));
    let want: Value = serde_json::from_str(&text).unwrap();
    if let Err(msg) = compare(name, &want, actual, tol) {
        panic!("golden mismatch: {msg}");
    }
}
