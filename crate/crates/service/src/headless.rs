//! Drives one session through the whole script without a client, the way
//! an operator following every instruction would.

use std::sync::Arc;

use hdl_core::envsim::Condition;
use hdl_core::nav::{Cell, GridMap, Instruction};
use uuid::Uuid;

use crate::artifacts::Artifacts;
use crate::session::{ApiError, DiagnosisOutcome, ErrorCode, Phase, Session};

/// The first `count` reference cells in row-major order.
pub fn localization_scan(map: &GridMap, count: usize) -> Vec<Cell> {
    map.anchor_visible_cells().into_iter().take(count).collect()
}

pub fn run_headless(artifacts: Arc<Artifacts>, condition: Condition, seed: u64) -> Result<DiagnosisOutcome, ApiError> {
    let scan = localization_scan(&artifacts.map, artifacts.scan_threshold);
    let mut session = Session::new(Uuid::from_u64_pair(0, seed), artifacts, condition, seed);
    session.initialize(&scan)?;
    loop {
        match session.phase() {
            Phase::Navigating(_) => {
                let Some(Instruction::Navigate { waypoints, .. }) = session.instructions()?.current else {
                    return Err(ApiError::new(ErrorCode::Internal, "navigation without waypoints", Some(session.phase())));
                };
                for &cell in &waypoints[1..] {
                    session.move_to(cell)?;
                }
            }
            Phase::ReadyToCapture(_) => {
                session.capture()?;
            }
            Phase::Captured => return session.diagnose(),
            other => {
                return Err(ApiError::new(ErrorCode::Internal, format!("unexpected phase {other:?}"), Some(other)));
            }
        }
    }
}
