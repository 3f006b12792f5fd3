//! Run manifests: the full resolved configuration, seeds, version, timings,
//! and digests of every output file, written alongside each CLI run.
//!
//! A manifest is sufficient to replay its run: feeding it back through
//! `--config` reproduces every output. Output digests are computed over a
//! canonical form in which volatile wall-time fields are zeroed, so digests
//! compare equal across replays while everything numerical stays bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Flat `key=value` configuration, the CLI's diff-friendly config format.
/// Lines starting with `#` and blank lines are ignored.
pub fn parse_flat_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "config line {}: expected key=value, got '{line}'",
                lineno + 1
            )));
        };
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

pub fn format_flat_config(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Load a config map from either a flat `key=value` file or a previously
/// written manifest (replay).
pub fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with('{') {
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("manifest parse: {e}")))?;
        Ok(manifest.resolved_config)
    } else {
        parse_flat_config(&text)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub resolved_config: BTreeMap<String, String>,
    /// per-phase wall times in seconds; informational, never digested
    pub wall_times: BTreeMap<String, f64>,
    /// canonical sha256 digests of every output file
    pub output_digests: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, resolved_config: BTreeMap<String, String>) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            resolved_config,
            wall_times: BTreeMap::new(),
            output_digests: BTreeMap::new(),
        }
    }

    pub fn record_time(&mut self, phase: &str, seconds: f64) {
        self.wall_times.insert(phase.to_string(), seconds);
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        self.output_digests.insert(name, canonical_digest(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest encode: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Names of JSON fields that hold wall-clock measurements; zeroed before
/// digesting so replays digest-compare equal.
const VOLATILE_FIELDS: &[&str] = &["wall_time", "step_fit_wall", "wall_times"];

fn zero_volatile(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if VOLATILE_FIELDS.contains(&k.as_str()) {
                    *v = serde_json::Value::from(0);
                } else {
                    zero_volatile(v);
                }
            }
        }
        serde_json::Value::Array(items) => {
            for v in items {
                zero_volatile(v);
            }
        }
        _ => {}
    }
}

/// Sha256 of a file's canonical content: JSON files have volatile timing
/// fields zeroed first, other files are digested byte-for-byte.
pub fn canonical_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let canonical = if path.extension().map(|e| e == "json").unwrap_or(false) {
        let mut value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("digest of {}: {e}", path.display())))?;
        zero_volatile(&mut value);
        serde_json::to_vec(&value).expect("json re-encode")
    } else {
        bytes
    };
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_config_roundtrip() {
        let text = "# comment\nnbar=100\ntemplate = qnorm\n\nseed=42\n";
        let map = parse_flat_config(text).unwrap();
        assert_eq!(map["nbar"], "100");
        assert_eq!(map["template"], "qnorm");
        assert_eq!(map["seed"], "42");
        let again = parse_flat_config(&format_flat_config(&map)).unwrap();
        assert_eq!(map, again);
    }

    #[test]
    fn flat_config_rejects_garbage() {
        assert!(parse_flat_config("not a pair").is_err());
    }

    #[test]
    fn manifest_replay_loads_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = BTreeMap::new();
        cfg.insert("nbar".to_string(), "50".to_string());
        let mut manifest = RunManifest::new("predict", 7, cfg.clone());
        manifest.record_time("fit", 1.25);
        let path = dir.path().join("manifest.json");
        manifest.write(&path).unwrap();
        let loaded = load_config_file(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn canonical_digest_ignores_wall_time() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        std::fs::write(&a, r#"{"rmse": 1.5, "score": -2.0, "wall_time": 3.25}"#).unwrap();
        std::fs::write(&b, r#"{"rmse": 1.5, "score": -2.0, "wall_time": 99.0}"#).unwrap();
        assert_eq!(
            canonical_digest(&a).unwrap(),
            canonical_digest(&b).unwrap()
        );
        let c = dir.path().join("c.json");
        std::fs::write(&c, r#"{"rmse": 1.6, "score": -2.0, "wall_time": 3.25}"#).unwrap();
        assert_ne!(
            canonical_digest(&a).unwrap(),
            canonical_digest(&c).unwrap()
        );
    }

    #[test]
    fn csv_digest_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        std::fs::write(&a, "x1,y\n1.0,2.0\n").unwrap();
        let d1 = canonical_digest(&a).unwrap();
        std::fs::write(&a, "x1,y\n1.0,2.00\n").unwrap();
        assert_ne!(d1, canonical_digest(&a).unwrap());
    }
}
