//! Config file loading and content hashing for run manifests.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reads a config from `.json` or `.toml` (anything else is parsed as TOML).
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), msg: e.to_string() })
    } else {
        toml::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), msg: e.to_string() })
    }
}

/// SHA-256 of the value's canonical JSON, as lowercase hex.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::PipelineConfig;

    #[test]
    fn empty_files_give_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("run.toml");
        std::fs::write(&toml_path, "").unwrap();
        let json_path = dir.path().join("run.json");
        std::fs::write(&json_path, "{}").unwrap();
        let a: PipelineConfig = load_config(&toml_path).unwrap();
        let b: PipelineConfig = load_config(&json_path).unwrap();
        assert_eq!(a, PipelineConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn sections_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[loss]\nkind = \"huber\"\n[reml]\nmax_iter = 7\n[test]\nlegacy_prefactor = true\n").unwrap();
        let cfg: PipelineConfig = load_config(&path).unwrap();
        assert_eq!(cfg.loss.kind, crate::loss::LossKind::Huber);
        assert_eq!(cfg.reml.max_iter, 7);
        assert!(cfg.test.legacy_prefactor);
        assert_ne!(config_hash(&cfg).unwrap(), config_hash(&PipelineConfig::default()).unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[loss]\nkindd = \"huber\"\n").unwrap();
        assert!(matches!(load_config::<PipelineConfig>(&path), Err(Error::Parse { .. })));
    }
}
