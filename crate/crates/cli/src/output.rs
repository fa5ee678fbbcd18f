//! Artifact writers and the run manifest.
//!
//! Floats are written with 17 significant digits (`{:.16e}`) so every value
//! round-trips. The run hash covers everything in the manifest except the
//! wall-clock duration and the artifact list, and each artifact carries it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                out.push_str(&n.to_string());
            } else {
                out.push_str(&fmt_f64(n.as_f64().expect("finite json number")));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(a) if a.is_empty() => out.push_str("[]"),
        Value::Array(a) => {
            out.push_str("[\n");
            for (i, x) in a.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_value(out, x, indent + 1);
                out.push_str(if i + 1 < a.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(m) if m.is_empty() => out.push_str("{}"),
        Value::Object(m) => {
            out.push_str("{\n");
            for (i, (k, x)) in m.iter().enumerate() {
                let _ = write!(out, "{}{}: ", pad(indent + 1), Value::String(k.clone()));
                write_value(out, x, indent + 1);
                out.push_str(if i + 1 < m.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

/// Pretty JSON with integers verbatim and floats at 17 significant digits.
/// Non-finite floats become `null` (serde_json already maps them so).
pub fn to_json_string<T: Serialize>(v: &T) -> Result<String> {
    let value = serde_json::to_value(v)?;
    let mut s = String::new();
    write_value(&mut s, &value, 0);
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn read(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok((
            Self {
                path: path.display().to_string(),
                sha256: sha256_hex(&bytes),
            },
            bytes,
        ))
    }
}

#[derive(Debug, Clone, Serialize)]
struct ArtifactEntry {
    name: String,
    sha256: String,
}

/// Collects artifacts for one run and writes them with the manifest.
pub struct Run {
    dir: PathBuf,
    command: &'static str,
    inputs: Vec<InputFile>,
    options: Value,
    seed: u64,
    run_hash: String,
    artifacts: Vec<(String, Vec<u8>)>,
}

impl Run {
    pub fn new<O: Serialize>(dir: &Path, command: &'static str, inputs: Vec<InputFile>, options: &O, seed: u64) -> Result<Self> {
        let options = serde_json::to_value(options)?;
        let identity = json!({
            "command": command,
            "inputs": inputs,
            "options": options,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
        });
        let run_hash = sha256_hex(to_json_string(&identity)?.as_bytes());
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            inputs,
            options,
            seed,
            run_hash,
            artifacts: Vec::new(),
        })
    }

    #[cfg(test)]
    pub fn hash(&self) -> &str {
        &self.run_hash
    }

    /// JSON artifact; `run` is added at the top level.
    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<()> {
        let mut v = serde_json::to_value(body)?;
        if let Value::Object(m) = &mut v {
            m.insert("run".into(), Value::String(self.run_hash.clone()));
        }
        let text = to_json_string(&v)?;
        self.artifacts.push((name.to_string(), text.into_bytes()));
        Ok(())
    }

    /// CSV artifact; the first line is a `# run=<hash>` comment.
    pub fn csv(&mut self, name: &str, body: &str) {
        let text = format!("# run={}\n{body}", self.run_hash);
        self.artifacts.push((name.to_string(), text.into_bytes()));
    }

    /// Writes every artifact and `manifest.json`.
    pub fn finish(self, converged: bool, duration_secs: f64) -> Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let mut entries = Vec::new();
        for (name, bytes) in &self.artifacts {
            let path = self.dir.join(name);
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            entries.push(ArtifactEntry {
                name: name.clone(),
                sha256: sha256_hex(bytes),
            });
        }
        let manifest = json!({
            "run": self.run_hash,
            "command": self.command,
            "inputs": self.inputs,
            "options": self.options,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "converged": converged,
            "duration_seconds": duration_secs,
            "artifacts": entries,
        });
        let path = self.dir.join("manifest.json");
        fs::write(&path, to_json_string(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_seventeen_digits() {
        for v in [0.1, 1.0 / 3.0, 2.0f64.sqrt() * 1e-300, 5e-324, 1.7976931348623157e308] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn json_keeps_integers_and_expands_floats() {
        let s = to_json_string(&json!({"n": 3, "x": 0.5, "v": [1.25], "e": []})).unwrap();
        assert!(s.contains("\"n\": 3"));
        assert!(s.contains("\"x\": 5.0000000000000000e-1"));
        assert!(s.contains("\"e\": []"));
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["v"][0].as_f64(), Some(1.25));
    }

    #[test]
    fn run_hash_ignores_duration() {
        let dir = tempfile::tempdir().unwrap();
        let mk = || Run::new(dir.path(), "validate", vec![], &json!({"a": 1}), 7).unwrap();
        let (a, b) = (mk(), mk());
        assert_eq!(a.hash(), b.hash());
        a.finish(true, 0.5).unwrap();
        let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["run"].as_str(), Some(b.hash()));
    }
}
