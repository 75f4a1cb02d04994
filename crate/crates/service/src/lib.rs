//! Deployment backend: operator sessions over HTTP, from localization to
//! diagnosis, with per-session timing logs.

pub mod artifacts;
pub mod config;
pub mod headless;
pub mod http;
pub mod session;
pub mod store;
pub mod usability;

pub use artifacts::{ArtifactError, Artifacts};
pub use config::ServiceConfig;
pub use headless::{localization_scan, run_headless};
pub use http::{router, serve};
pub use session::{ApiError, DiagnosisOutcome, DiagnosisResult, ErrorCode, Phase, Session};
pub use store::{condition_for_seed, ArtifactSource, CreateSession, SeedPolicy, SessionStore};
pub use usability::usability_coverage;
