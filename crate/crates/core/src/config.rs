//! Run configuration: one TOML file describing a whole run — dataset paths,
//! model dimensions, and optimization settings — with CLI flags layered on
//! top. The canonical JSON form of the merged config hashes into every
//! artifact so results stay traceable to the settings that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, WxError};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Filesystem inputs and outputs of a run. All optional here; each
/// subcommand demands the paths it actually needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Artifact directory; defaults to a hash-named folder under the home
    /// root (see [`wxct_home`]).
    pub out_dir: Option<PathBuf>,
}

/// Everything a run needs, merged from file defaults and flag overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Compute device; only "cpu" exists today, the field keeps configs
    /// forward-compatible.
    pub device: String,
    pub data: DataPaths,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            device: "cpu".into(),
            data: DataPaths::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML run file. Unknown or ill-typed keys are rejected with
    /// the offending field path in the message.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| WxError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| WxError::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(WxError::Config(format!(
                "device {:?} is not available; only \"cpu\" is",
                self.device
            )));
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// SHA-256 over the canonical JSON form; stable across runs, sensitive
    /// to every field.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("JSON serialization");
        let digest = Sha256::digest(json.as_bytes());
        let mut s = String::with_capacity(64);
        for b in digest {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    /// Canonical JSON snapshot embedded into reports.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("JSON serialization")
    }
}

/// Root directory for run artifacts and caches: `$WXCT_HOME` when set,
/// otherwise `.wxct` under the working directory.
pub fn wxct_home() -> PathBuf {
    std::env::var_os("WXCT_HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".wxct"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_file() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.model.encoder.layers, 4);
    }

    #[test]
    fn partial_file_overrides_only_named_fields() {
        let cfg: RunConfig = toml::from_str(
            "[train]\nlr_init = 0.001\nseed = 9\n\n[model.encoder]\nd_model = 128\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr_init, 0.001);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.batch_size, 32, "unnamed fields keep defaults");
        assert_eq!(cfg.model.encoder.d_model, 128);
        assert_eq!(cfg.model.encoder.heads, 4);
    }

    #[test]
    fn unknown_field_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nlearning_rate = 0.1\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "error should name the bad field: {err}");
    }

    #[test]
    fn file_round_trip_preserves_config() {
        let mut cfg = RunConfig::default();
        cfg.train.max_epochs = 7;
        cfg.data.train_manifest = Some(PathBuf::from("data/train.jsonl"));
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hash_is_stable_and_field_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = RunConfig::default();
        c.train.seed = 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn only_cpu_device_validates() {
        let cfg = RunConfig { device: "cuda:0".into(), ..RunConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
