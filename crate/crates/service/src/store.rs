//! Live sessions keyed by id. Each session sits behind its own lock so
//! calls on one session are serialized while sessions proceed in parallel.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use hdl_core::envsim::{derive_seed, Condition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::artifacts::{ArtifactError, Artifacts};
use crate::session::{ApiError, ErrorCode, Session, SessionView};

/// Where session seeds come from when a request does not name one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SeedPolicy {
    Fixed { seed: u64 },
    Random,
}

impl Default for SeedPolicy {
    fn default() -> Self {
        SeedPolicy::Fixed { seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub enum ArtifactSource {
    Loaded(Arc<Artifacts>),
    /// Read on first use; a failed read is reported to the caller and
    /// retried on the next session.
    Files {
        weights: PathBuf,
        plan: PathBuf,
        map: Option<PathBuf>,
        scan_threshold: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub condition: Option<Condition>,
    pub seed: Option<u64>,
}

/// Condition simulated by a session that did not choose one.
pub fn condition_for_seed(seed: u64) -> Condition {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC0_4D]));
    Condition::ALL[rng.random_range(0..Condition::ALL.len())]
}

pub struct SessionStore {
    source: ArtifactSource,
    loaded: Mutex<Option<Arc<Artifacts>>>,
    sessions: RwLock<HashMap<Uuid, Arc<Mutex<Session>>>>,
    log_dir: Option<PathBuf>,
    seeds: SeedPolicy,
}

impl SessionStore {
    pub fn new(source: ArtifactSource, log_dir: Option<PathBuf>, seeds: SeedPolicy) -> Self {
        let loaded = match &source {
            ArtifactSource::Loaded(a) => Some(a.clone()),
            ArtifactSource::Files { .. } => None,
        };
        Self {
            source,
            loaded: Mutex::new(loaded),
            sessions: RwLock::new(HashMap::new()),
            log_dir,
            seeds,
        }
    }

    pub fn artifacts(&self) -> Result<Arc<Artifacts>, ApiError> {
        let mut slot = self.loaded.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(a) = slot.as_ref() {
            return Ok(a.clone());
        }
        let ArtifactSource::Files {
            weights,
            plan,
            map,
            scan_threshold,
        } = &self.source
        else {
            unreachable!("loaded sources are cached at construction")
        };
        let artifacts = Artifacts::load(weights, plan, map.as_deref(), *scan_threshold).map_err(artifact_error)?;
        let artifacts = Arc::new(artifacts);
        *slot = Some(artifacts.clone());
        Ok(artifacts)
    }

    pub fn create(&self, request: CreateSession) -> Result<SessionView, ApiError> {
        let artifacts = self.artifacts()?;
        let seed = request.seed.unwrap_or_else(|| match self.seeds {
            SeedPolicy::Fixed { seed } => seed,
            SeedPolicy::Random => rand::rng().random(),
        });
        let condition = request.condition.unwrap_or_else(|| condition_for_seed(seed));
        let mut session = Session::new(Uuid::new_v4(), artifacts, condition, seed);
        if let Some(dir) = &self.log_dir {
            session
                .persist_to(dir)
                .map_err(|e| ApiError::new(ErrorCode::Internal, format!("cannot open session log in {}: {e}", dir.display()), None))?;
        }
        let view = session.view();
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(view.id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let missing = || ApiError::new(ErrorCode::NotFound, format!("no session {id}"), None);
        let id = Uuid::parse_str(id).map_err(|_| missing())?;
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(&id)
            .cloned()
            .ok_or_else(missing)
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn artifact_error(e: ArtifactError) -> ApiError {
    let code = match e {
        ArtifactError::Missing { .. } => ErrorCode::MissingArtifact,
        _ => ErrorCode::Internal,
    };
    ApiError::new(code, e.to_string(), None)
}
