//! Helpers for driving the `annoloop` binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use annoloop_core::providers::MockScript;
use serde_json::json;

pub fn annoloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_annoloop"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn annoloop")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, contents).unwrap();
    p
}

/// Experiment document with mock models and a fast retry policy.
pub fn mock_config(annotator: &MockScript, reviewer: Option<&MockScript>) -> String {
    let spec = |id: &str, s: &MockScript| json!({ "provider_kind": "Mock", "model_id": id, "mock": s });
    let mut doc = json!({
        "paradigm": "zero_shot",
        "annotator": spec("annotator", annotator),
        "retry": { "max_attempts": 3, "base_delay_ms": 1 },
    });
    if let Some(r) = reviewer {
        doc["reviewer"] = spec("reviewer", r);
        doc["reviewer_mode"] = json!(true);
    }
    serde_json::to_string_pretty(&doc).unwrap()
}
