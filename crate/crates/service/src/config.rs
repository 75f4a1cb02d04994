//! Service configuration file.

use std::path::{Path, PathBuf};

use hdl_core::nav::DEFAULT_SCAN_THRESHOLD;
use serde::{Deserialize, Serialize};

use crate::store::SeedPolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub weights: PathBuf,
    pub plan: PathBuf,
    /// Map fixture; the bundled default map when absent.
    pub map: Option<PathBuf>,
    pub bind: String,
    pub scan_threshold: usize,
    pub seed: SeedPolicy,
    /// Directory for per-session JSON-lines logs; logging to disk is off
    /// when absent.
    pub log_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            weights: PathBuf::from("artifacts/protonet.hdlw"),
            plan: PathBuf::from("artifacts/plan.json"),
            map: None,
            bind: "127.0.0.1:8080".into(),
            scan_threshold: DEFAULT_SCAN_THRESHOLD,
            seed: SeedPolicy::default(),
            log_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
