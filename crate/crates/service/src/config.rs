use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("bad config file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad value for {var}: {value:?}")]
    Env { var: &'static str, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub addr: String,
    pub store: PathBuf,
    /// Jobs allowed to run at once.
    pub workers: usize,
    /// Verdict events between snapshots.
    pub snapshot_every: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            store: PathBuf::from("store"),
            workers: 2,
            snapshot_every: 256,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Defaults, then the TOML file if given, then `NNAUG_*` variables.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = var("NNAUG_ADDR") {
            self.addr = v;
        }
        if let Some(v) = var("NNAUG_STORE") {
            self.store = PathBuf::from(v);
        }
        if let Some(v) = var("NNAUG_WORKERS") {
            self.workers = v.parse().ok().filter(|&n| n > 0).ok_or(ConfigError::Env { var: "NNAUG_WORKERS", value: v })?;
        }
        if let Some(v) = var("NNAUG_SNAPSHOT_EVERY") {
            self.snapshot_every = v
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or(ConfigError::Env { var: "NNAUG_SNAPSHOT_EVERY", value: v })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_then_env() {
        let mut cfg = ServiceConfig::from_toml("addr = \"0.0.0.0:9000\"\nworkers = 8\n").unwrap();
        assert_eq!(cfg.workers, 8);
        assert_eq!(cfg.snapshot_every, 256);
        cfg.apply_env(|k| (k == "NNAUG_WORKERS").then(|| "3".to_string())).unwrap();
        assert_eq!(cfg.workers, 3);
        assert_eq!(cfg.addr, "0.0.0.0:9000");
        assert!(cfg.apply_env(|k| (k == "NNAUG_WORKERS").then(|| "0".to_string())).is_err());
        assert!(ServiceConfig::from_toml("port = 1").is_err());
    }
}
