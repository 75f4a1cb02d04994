//! Run configuration: command-line flags with a JSON file filling in
//! whatever the flags leave out.

use std::path::{Path, PathBuf};

use anyhow::Context;
use hdl_core::dqn::DqnConfig;
use hdl_core::envsim::CANONICAL_SEED;
use hdl_core::nav::DEFAULT_SCAN_THRESHOLD;
use hdl_core::protonet::ProtoConfig;
use hdl_service::{SeedPolicy, ServiceConfig};
use serde::{Deserialize, Serialize};

/// Values shared by every subcommand, as given on the command line.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Flags {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true)]
    pub plan: Option<PathBuf>,
    #[arg(long, global = true)]
    pub map: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    /// JSON run configuration; its values apply only where a flag is absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub map: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub episodes: Option<usize>,
    pub dqn: Option<DqnConfig>,
    pub protonet: Option<ProtoConfig>,
    pub bind: Option<String>,
    pub scan_threshold: Option<usize>,
    pub seed_policy: Option<SeedPolicy>,
    pub log_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub weights: PathBuf,
    pub plan: PathBuf,
    pub map: Option<PathBuf>,
    pub dqn: DqnConfig,
    pub protonet: ProtoConfig,
    /// Epoch count when given explicitly by flag or file.
    pub epochs: Option<usize>,
    pub bind: String,
    pub scan_threshold: usize,
    pub seed_policy: SeedPolicy,
    pub log_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(flags: &Flags) -> anyhow::Result<Self> {
        let file = match &flags.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        Ok(Self::merge(flags, file))
    }

    pub fn merge(flags: &Flags, file: FileConfig) -> Self {
        let service = ServiceConfig::default();
        let mut dqn = file.dqn.unwrap_or_default();
        if let Some(episodes) = flags.episodes.or(file.episodes) {
            dqn.episodes = episodes;
        }
        let mut protonet = file.protonet.unwrap_or_default();
        let epochs = flags.epochs.or(file.epochs);
        if let Some(epochs) = epochs {
            protonet.epochs = epochs;
        }
        Self {
            seed: flags.seed.or(file.seed).unwrap_or(CANONICAL_SEED),
            data_dir: flags.data_dir.clone().or(file.data_dir).unwrap_or_else(|| PathBuf::from("data")),
            weights: flags.weights.clone().or(file.weights).unwrap_or(service.weights),
            plan: flags.plan.clone().or(file.plan).unwrap_or(service.plan),
            map: flags.map.clone().or(file.map),
            dqn,
            protonet,
            epochs,
            bind: file.bind.unwrap_or(service.bind),
            scan_threshold: file.scan_threshold.unwrap_or(DEFAULT_SCAN_THRESHOLD),
            seed_policy: file.seed_policy.unwrap_or_default(),
            log_dir: file.log_dir,
        }
    }

    pub fn service(&self) -> ServiceConfig {
        ServiceConfig {
            weights: self.weights.clone(),
            plan: self.plan.clone(),
            map: self.map.clone(),
            bind: self.bind.clone(),
            scan_threshold: self.scan_threshold,
            seed: self.seed_policy.clone(),
            log_dir: self.log_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let flags = Flags {
            seed: Some(4),
            epochs: Some(7),
            ..Flags::default()
        };
        let file: FileConfig =
            serde_json::from_str(r#"{"seed": 9, "epochs": 3, "episodes": 12, "plan": "p.json", "bind": "0.0.0.0:1"}"#).unwrap();
        let run = RunConfig::merge(&flags, file);
        assert_eq!(run.seed, 4);
        assert_eq!(run.protonet.epochs, 7);
        assert_eq!(run.dqn.episodes, 12);
        assert_eq!(run.plan, PathBuf::from("p.json"));
        assert_eq!(run.bind, "0.0.0.0:1");
    }

    #[test]
    fn defaults_without_file() {
        let run = RunConfig::merge(&Flags::default(), FileConfig::default());
        assert_eq!(run.seed, CANONICAL_SEED);
        assert_eq!(run.dqn, DqnConfig::default());
        assert_eq!(run.protonet, ProtoConfig::default());
        assert_eq!(run.data_dir, PathBuf::from("data"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"epoch": 3}"#).is_err());
    }
}
