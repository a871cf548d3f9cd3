use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const CACHE_ENV: &str = "XPLAN_CACHE_DIR";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Content hash of everything a stage reads: its name, the config, its
/// parameters and the bytes of its input files.
pub fn cache_key(stage: &str, config_hash: &str, params: &Value, inputs: &BTreeMap<String, String>) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        stage: &'a str,
        version: &'a str,
        config: &'a str,
        params: &'a Value,
        inputs: &'a BTreeMap<String, String>,
    }
    let key = Key {
        stage,
        version: env!("CARGO_PKG_VERSION"),
        config: config_hash,
        params,
        // keyed by content only, so moving a file keeps its hits
        inputs,
    };
    sha256_hex(serde_json::to_string(&key).expect("key serializes").as_bytes())
}

pub fn cache_root(out: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => out.join(".xplan-cache"),
    }
}

/// Copies cached outputs for `key` into `out`. Returns false on a miss.
pub fn restore(root: &Path, key: &str, outputs: &[&str], out: &Path) -> Result<bool> {
    let dir = root.join(key);
    if !outputs.iter().all(|o| dir.join(o).is_file()) {
        return Ok(false);
    }
    for o in outputs {
        fs::copy(dir.join(o), out.join(o)).with_context(|| format!("restoring {o} from cache"))?;
    }
    Ok(true)
}

pub fn store(root: &Path, key: &str, outputs: &[&str], out: &Path) -> Result<()> {
    let dir = root.join(key);
    fs::create_dir_all(&dir).with_context(|| format!("creating cache dir {}", dir.display()))?;
    for o in outputs {
        fs::copy(out.join(o), dir.join(o)).with_context(|| format!("caching {o}"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_every_input() {
        let p = serde_json::json!({"eval_seed": 0});
        let mut inputs = BTreeMap::new();
        inputs.insert("data".to_string(), sha256_hex(b"abc"));
        let base = cache_key("build-graph", "h1", &p, &inputs);
        assert_eq!(base, cache_key("build-graph", "h1", &p, &inputs));
        assert_ne!(base, cache_key("build-graph", "h2", &p, &inputs));
        assert_ne!(base, cache_key("plan", "h1", &p, &inputs));
        assert_ne!(base, cache_key("build-graph", "h1", &serde_json::json!({"eval_seed": 1}), &inputs));
        inputs.insert("data".to_string(), sha256_hex(b"abd"));
        assert_ne!(base, cache_key("build-graph", "h1", &p, &inputs));
    }

    #[test]
    fn store_then_restore() {
        let out = tempfile::tempdir().unwrap();
        let other = tempfile::tempdir().unwrap();
        let root = out.path().join("cache");
        fs::write(out.path().join("a.json"), "1").unwrap();
        assert!(!restore(&root, "k", &["a.json"], other.path()).unwrap());
        store(&root, "k", &["a.json"], out.path()).unwrap();
        assert!(restore(&root, "k", &["a.json"], other.path()).unwrap());
        assert_eq!(fs::read_to_string(other.path().join("a.json")).unwrap(), "1");
    }
}
