//! Service configuration file:
//!
//! ```json
//! {"storage_root": "maskguide-data", "workers": 2, "event_cadence": 10,
//!  "host": "127.0.0.1", "port": 8080, "input_root": ".",
//!  "vocab_path": null, "backends": {"generator": "toy"}}
//! ```
//!
//! `MASKGUIDE_STORAGE_ROOT` overrides `storage_root`.

use std::path::{Path, PathBuf};

use maskguide::backends::BackendConfig;
use maskguide::ClassVocabulary;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const STORAGE_ROOT_ENV: &str = "MASKGUIDE_STORAGE_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub storage_root: PathBuf,
    pub workers: usize,
    /// A loss event is emitted every `event_cadence` optimizer steps.
    pub event_cadence: usize,
    pub host: String,
    pub port: u16,
    /// Base directory for `mask_path` and `vocab_path` in submitted specs.
    pub input_root: PathBuf,
    /// Vocabulary sidecar; the toy vocabulary when absent.
    pub vocab_path: Option<PathBuf>,
    pub backends: BackendConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            storage_root: PathBuf::from("maskguide-data"),
            workers: 2,
            event_cadence: 10,
            host: "127.0.0.1".into(),
            port: 8080,
            input_root: PathBuf::from("."),
            vocab_path: None,
            backends: BackendConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads a config file; relative paths inside it resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config: ServiceConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.storage_root = base.join(&config.storage_root);
        config.input_root = base.join(&config.input_root);
        config.vocab_path = config.vocab_path.map(|p| base.join(p));
        config.validate()?;
        Ok(config)
    }

    /// Applies environment overrides.
    pub fn with_env(mut self) -> Self {
        if let Some(root) = std::env::var_os(STORAGE_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.storage_root = PathBuf::from(root);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(ServiceError::Config("workers must be at least 1".into()));
        }
        if self.event_cadence == 0 {
            return Err(ServiceError::Config("event_cadence must be at least 1".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        match &self.vocab_path {
            None => Ok(ClassVocabulary::toy()),
            Some(p) => Ok(ClassVocabulary::from_json(&std::fs::read_to_string(p)?)?),
        }
    }
}
