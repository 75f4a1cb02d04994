//! Trained model, plan and map loaded once and shared read-only.

use std::path::{Path, PathBuf};

use hdl_core::dqn::CollectionPlan;
use hdl_core::nav::{build_script, GridMap, InstructionScript, NavError};
use hdl_core::protonet::ProtoModel;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{kind} file not found: {}", path.display())]
    Missing { kind: &'static str, path: PathBuf },
    #[error("cannot read plan {}: {message}", path.display())]
    Plan { path: PathBuf, message: String },
    #[error("cannot read weights {}: {message}", path.display())]
    Weights { path: PathBuf, message: String },
    #[error("cannot read map {}: {message}", path.display())]
    Map { path: PathBuf, message: String },
    #[error("plan records no weights fingerprint; retrain the classifier on this plan")]
    Unfingerprinted,
    #[error("weights fingerprint {found} does not match the plan's {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("plan cannot be routed on the map: {0}")]
    Route(#[from] NavError),
}

#[derive(Clone, Debug)]
pub struct Artifacts {
    pub model: ProtoModel,
    pub plan: CollectionPlan,
    pub map: GridMap,
    pub script: InstructionScript,
    pub scan_threshold: usize,
    pub fingerprint: String,
}

impl Artifacts {
    /// Checks that the plan was trained into these weights and that every
    /// plan entry is reachable on the map.
    pub fn new(model: ProtoModel, plan: CollectionPlan, map: GridMap, scan_threshold: usize) -> Result<Self, ArtifactError> {
        let fingerprint = model.fingerprint();
        match &plan.weights_fingerprint {
            None => return Err(ArtifactError::Unfingerprinted),
            Some(expected) if *expected != fingerprint => {
                return Err(ArtifactError::Fingerprint {
                    expected: expected.clone(),
                    found: fingerprint,
                })
            }
            Some(_) => {}
        }
        let script = build_script(&plan, &map, scan_threshold)?;
        Ok(Self {
            model,
            plan,
            map,
            script,
            scan_threshold,
            fingerprint,
        })
    }

    /// Reads the plan manifest, the weights it names by fingerprint and the
    /// map (the bundled default when `map` is `None`).
    pub fn load(weights: &Path, plan: &Path, map: Option<&Path>, scan_threshold: usize) -> Result<Self, ArtifactError> {
        let plan_value = {
            require(plan, "plan")?;
            CollectionPlan::load(plan).map_err(|e| ArtifactError::Plan {
                path: plan.to_path_buf(),
                message: e.to_string(),
            })?
        };
        require(weights, "weights")?;
        let model = ProtoModel::load(weights, plan_value.plan.len()).map_err(|e| ArtifactError::Weights {
            path: weights.to_path_buf(),
            message: e.to_string(),
        })?;
        let map_value = match map {
            Some(path) => {
                require(path, "map")?;
                GridMap::load(path).map_err(|e| ArtifactError::Map {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?
            }
            None => GridMap::default_map(),
        };
        Self::new(model, plan_value, map_value, scan_threshold)
    }
}

fn require(path: &Path, kind: &'static str) -> Result<(), ArtifactError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ArtifactError::Missing {
            kind,
            path: path.to_path_buf(),
        })
    }
}
