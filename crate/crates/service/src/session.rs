//! One operator session: scan to localize, walk to each plan pose, capture,
//! then diagnose. Every call checks its phase and arguments before touching
//! state, so a rejected call leaves the session exactly as it was.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use hdl_core::dqn::CollectionPlan;
use hdl_core::envsim::{generate_sample, CollectionState, Condition, Provenance};
use hdl_core::nav::{astar, capture_seconds, cell_array, cell_list, manhattan, Cell, Instruction, InstructionScript};
use hdl_core::protonet::{argmax, stack_multimodal};
use hdl_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::artifacts::Artifacts;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", content = "step", rename_all = "snake_case")]
pub enum Phase {
    Created,
    Initialized,
    Navigating(usize),
    ReadyToCapture(usize),
    Captured,
    Diagnosed,
}

impl Phase {
    /// Whether `self -> next` is a step the script allows for a plan of
    /// `len` entries.
    pub fn allows(self, next: Phase, len: usize) -> bool {
        use Phase::*;
        match (self, next) {
            (Created, Initialized) => true,
            (Initialized, Navigating(0)) | (Initialized, ReadyToCapture(0)) => true,
            (Navigating(i), ReadyToCapture(j)) => i == j,
            (ReadyToCapture(i), Navigating(j)) | (ReadyToCapture(i), ReadyToCapture(j)) => j == i + 1 && j < len,
            (ReadyToCapture(i), Captured) => i + 1 == len,
            (Captured, Diagnosed) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    InvalidPhase,
    InsufficientScan,
    IllegalMove,
    BadRequest,
    MissingArtifact,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    pub phase: Option<Phase>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>, phase: Option<Phase>) -> Self {
        Self {
            code,
            message: message.into(),
            phase,
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionScore {
    pub condition: Condition,
    pub log_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub predicted: Condition,
    pub log_probabilities: Vec<ConditionScore>,
    pub plan: CollectionPlan,
    pub weights_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseDuration {
    pub phase: Phase,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Created { session: Uuid, seed: u64 },
    Transition { from: Option<Phase>, to: Phase },
    Capture { step: usize, state: String, duration_seconds: u32 },
    Diagnosis {
        predicted: Condition,
        ground_truth: Condition,
        durations: Vec<PhaseDuration>,
    },
    ClientTiming { phase: String, elapsed_ms: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: usize,
    /// Milliseconds since the session was created.
    pub at_ms: f64,
    #[serde(flatten)]
    pub event: LogEvent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: Uuid,
    pub phase: Phase,
    #[serde(with = "cell_array")]
    pub cell: Cell,
    pub seed: u64,
    pub plan: CollectionPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instructions {
    pub phase: Phase,
    #[serde(with = "cell_array")]
    pub cell: Cell,
    pub script: InstructionScript,
    /// What the operator should do now; absent once diagnosed.
    pub current: Option<Instruction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitializeOutcome {
    pub phase: Phase,
    pub coverage: usize,
    pub threshold: usize,
    #[serde(with = "cell_list")]
    pub waypoints: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveOutcome {
    pub phase: Phase,
    #[serde(with = "cell_array")]
    pub cell: Cell,
    /// Share of the current leg covered, from the leg's start distance.
    pub progress: f64,
    #[serde(with = "cell_list")]
    pub remaining: Vec<Cell>,
    pub capture: Option<Instruction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureReceipt {
    pub step: usize,
    pub state: String,
    pub duration_seconds: u32,
    /// Seconds shown to the operator while recording, from the full
    /// duration down to zero; empty for photos.
    pub countdown: Vec<u32>,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisOutcome {
    pub result: DiagnosisResult,
    pub ground_truth: Condition,
    pub durations: Vec<PhaseDuration>,
}

/// Observable state, for checking that rejected calls change nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub phase: Phase,
    pub cell: Cell,
    pub captures: usize,
    pub log_len: usize,
    pub diagnosed: bool,
}

pub struct Session {
    id: Uuid,
    seed: u64,
    condition: Condition,
    artifacts: Arc<Artifacts>,
    phase: Phase,
    cell: Cell,
    leg_cost: usize,
    captures: Vec<Tensor>,
    result: Option<DiagnosisResult>,
    log: Vec<LogEntry>,
    transitions: Vec<(Phase, f64)>,
    started: Instant,
    sink: Option<File>,
}

impl Session {
    pub fn new(id: Uuid, artifacts: Arc<Artifacts>, condition: Condition, seed: u64) -> Self {
        let cell = artifacts.map.start();
        let mut s = Self {
            id,
            seed,
            condition,
            artifacts,
            phase: Phase::Created,
            cell,
            leg_cost: 0,
            captures: Vec::new(),
            result: None,
            log: Vec::new(),
            transitions: Vec::new(),
            started: Instant::now(),
            sink: None,
        };
        s.record(LogEvent::Created { session: id, seed });
        s.enter(Phase::Created);
        s
    }

    /// Mirrors the log, including entries already written, into a JSON-lines
    /// file under `dir`.
    pub fn persist_to(&mut self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut file = File::options().create(true).append(true).open(dir.join(format!("{}.jsonl", self.id)))?;
        for entry in &self.log {
            writeln!(file, "{}", serde_json::to_string(entry).expect("log entries serialize"))?;
        }
        self.sink = Some(file);
        Ok(())
    }

    pub fn id(&self) -> Uuid {
        self.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn cell(&self) -> Cell {
        self.cell
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Operating condition being simulated. Not exposed over the API until
    /// a diagnosis is returned.
    pub fn ground_truth(&self) -> Condition {
        self.condition
    }

    pub fn captured(&self) -> &[Tensor] {
        &self.captures
    }

    /// The diagnosis entry is the only one naming the ground truth, so the
    /// log can be served as is.
    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn result(&self) -> Option<&DiagnosisResult> {
        self.result.as_ref()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            phase: self.phase,
            cell: self.cell,
            captures: self.captures.len(),
            log_len: self.log.len(),
            diagnosed: self.result.is_some(),
        }
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            id: self.id,
            phase: self.phase,
            cell: self.cell,
            seed: self.seed,
            plan: self.artifacts.plan.clone(),
        }
    }

    fn plan_state(&self, step: usize) -> CollectionState {
        self.artifacts.plan.plan[step].state()
    }

    fn anchor_cell(&self, step: usize) -> Cell {
        let location = self.plan_state(step).location();
        self.artifacts.map.anchor(location).expect("artifacts validate anchors").cell
    }

    fn route(&self, from: Cell, step: usize) -> Result<Vec<Cell>, ApiError> {
        astar(&self.artifacts.map, from, self.anchor_cell(step))
            .map(|p| p.cells)
            .map_err(|e| self.error(ErrorCode::Internal, e.to_string()))
    }

    fn navigate_instruction(&self, step: usize, waypoints: Vec<Cell>) -> Instruction {
        let entry = self.artifacts.plan.plan[step];
        let location = entry.state().location();
        Instruction::Navigate {
            waypoints,
            destination: location.id(),
            facing: self.artifacts.map.anchor(location).expect("artifacts validate anchors").facing,
            icon: entry.modality.into(),
        }
    }

    fn capture_instruction(&self, step: usize) -> Instruction {
        let modality = self.plan_state(step).modality;
        Instruction::Capture {
            modality,
            duration_seconds: capture_seconds(modality),
        }
    }

    fn error(&self, code: ErrorCode, message: impl Into<String>) -> ApiError {
        ApiError::new(code, message, Some(self.phase))
    }

    fn wrong_phase(&self, action: &str, expected: &str) -> ApiError {
        self.error(
            ErrorCode::InvalidPhase,
            format!("cannot {action} while {}; expected {expected}", phase_label(self.phase)),
        )
    }

    fn elapsed_ms(&self) -> f64 {
        self.started.elapsed().as_secs_f64() * 1e3
    }

    fn record(&mut self, event: LogEvent) {
        let at_ms = self.log.last().map_or(0.0, |e| e.at_ms).max(self.elapsed_ms());
        let entry = LogEntry {
            seq: self.log.len(),
            at_ms,
            event,
        };
        if let Some(file) = self.sink.as_mut() {
            // A full disk must not wedge the session; the in-memory log stays
            // authoritative.
            let _ = writeln!(file, "{}", serde_json::to_string(&entry).expect("log entries serialize"));
        }
        self.log.push(entry);
    }

    fn enter(&mut self, next: Phase) {
        let from = self.transitions.last().map(|&(p, _)| p);
        if let Some(prev) = from {
            debug_assert!(prev.allows(next, self.artifacts.plan.plan.len()), "{prev:?} -> {next:?}");
        }
        self.phase = next;
        self.record(LogEvent::Transition { from, to: next });
        let at = self.log.last().expect("just recorded").at_ms;
        self.transitions.push((next, at));
    }

    /// Starts leg `step`: navigate to its anchor, or go straight to capture
    /// when the operator is already standing there.
    fn begin_leg(&mut self, step: usize, cost: usize) {
        self.leg_cost = cost;
        if cost == 0 {
            self.enter(Phase::ReadyToCapture(step));
        } else {
            self.enter(Phase::Navigating(step));
        }
    }

    pub fn instructions(&self) -> Result<Instructions, ApiError> {
        let current = match self.phase {
            Phase::Created | Phase::Initialized => Some(self.artifacts.script.steps[0].clone()),
            Phase::Navigating(i) => Some(self.navigate_instruction(i, self.route(self.cell, i)?)),
            Phase::ReadyToCapture(i) => Some(self.capture_instruction(i)),
            Phase::Captured => Some(Instruction::Diagnose),
            Phase::Diagnosed => None,
        };
        Ok(Instructions {
            phase: self.phase,
            cell: self.cell,
            script: self.artifacts.script.clone(),
            current,
        })
    }

    /// Localizes the operator from a scan of map cells; on success the first
    /// leg's waypoints are returned.
    pub fn initialize(&mut self, scan: &[Cell]) -> Result<InitializeOutcome, ApiError> {
        if self.phase != Phase::Created {
            return Err(self.wrong_phase("initialize", "created"));
        }
        let threshold = self.artifacts.scan_threshold;
        let coverage = self.artifacts.map.scan_coverage(scan);
        if coverage < threshold {
            return Err(self.error(
                ErrorCode::InsufficientScan,
                format!("scan found {coverage} of {threshold} reference points; keep scanning around the rig"),
            ));
        }
        let waypoints = self.route(self.cell, 0)?;
        self.enter(Phase::Initialized);
        self.begin_leg(0, waypoints.len() - 1);
        Ok(InitializeOutcome {
            phase: self.phase,
            coverage,
            threshold,
            waypoints,
        })
    }

    /// One 4-connected step onto an open cell.
    pub fn move_to(&mut self, next: Cell) -> Result<MoveOutcome, ApiError> {
        let Phase::Navigating(step) = self.phase else {
            return Err(self.wrong_phase("move", "navigating"));
        };
        let map = &self.artifacts.map;
        if !map.in_bounds(next) {
            return Err(self.error(ErrorCode::IllegalMove, format!("cell {next:?} is outside the map")));
        }
        if !map.is_open(next) {
            return Err(self.error(ErrorCode::IllegalMove, format!("cell {next:?} is blocked")));
        }
        if manhattan(self.cell, next) != 1 {
            return Err(self.error(
                ErrorCode::IllegalMove,
                format!("cell {next:?} is not adjacent to {:?}", self.cell),
            ));
        }
        let remaining = self.route(next, step)?;
        self.cell = next;
        let left = remaining.len() - 1;
        let progress = (1.0 - left as f64 / self.leg_cost as f64).clamp(0.0, 1.0);
        let capture = if left == 0 {
            self.enter(Phase::ReadyToCapture(step));
            Some(self.capture_instruction(step))
        } else {
            None
        };
        Ok(MoveOutcome {
            phase: self.phase,
            cell: self.cell,
            progress,
            remaining,
            capture,
        })
    }

    /// Records the Field sample of the current plan entry for this session's
    /// condition and seed.
    pub fn capture(&mut self) -> Result<CaptureReceipt, ApiError> {
        let Phase::ReadyToCapture(step) = self.phase else {
            return Err(self.wrong_phase("capture", "ready to capture"));
        };
        let state = self.plan_state(step);
        let tensor = generate_sample(state, self.condition, Provenance::Field, self.seed)
            .preprocess()
            .map_err(|e| self.error(ErrorCode::Internal, e.to_string()))?;
        let next_leg = if step + 1 < self.artifacts.plan.plan.len() {
            Some(self.route(self.cell, step + 1)?.len() - 1)
        } else {
            None
        };
        let duration_seconds = capture_seconds(state.modality);
        self.captures.push(tensor);
        self.record(LogEvent::Capture {
            step,
            state: state.id(),
            duration_seconds,
        });
        match next_leg {
            Some(cost) => self.begin_leg(step + 1, cost),
            None => self.enter(Phase::Captured),
        }
        Ok(CaptureReceipt {
            step,
            state: state.id(),
            duration_seconds,
            countdown: if duration_seconds > 0 {
                (0..=duration_seconds).rev().collect()
            } else {
                Vec::new()
            },
            phase: self.phase,
        })
    }

    /// Classifies the stacked captures against the stored prototypes.
    pub fn diagnose(&mut self) -> Result<DiagnosisOutcome, ApiError> {
        if self.phase != Phase::Captured {
            return Err(self.wrong_phase("diagnose", "captured"));
        }
        let stacked = stack_multimodal(&self.captures.iter().collect::<Vec<_>>())
            .map_err(|e| self.error(ErrorCode::Internal, e.to_string()))?;
        let log_probs = self
            .artifacts
            .model
            .log_probs(&stacked)
            .map_err(|e| self.error(ErrorCode::Internal, e.to_string()))?;
        let result = DiagnosisResult {
            predicted: Condition::ALL[argmax(&log_probs)],
            log_probabilities: Condition::ALL
                .iter()
                .zip(&log_probs)
                .map(|(&condition, &log_probability)| ConditionScore {
                    condition,
                    log_probability,
                })
                .collect(),
            plan: self.artifacts.plan.clone(),
            weights_fingerprint: self.artifacts.fingerprint.clone(),
        };
        self.enter(Phase::Diagnosed);
        let durations = self.durations();
        self.record(LogEvent::Diagnosis {
            predicted: result.predicted,
            ground_truth: self.condition,
            durations: durations.clone(),
        });
        self.result = Some(result.clone());
        Ok(DiagnosisOutcome {
            result,
            ground_truth: self.condition,
            durations,
        })
    }

    /// Time spent in each completed phase, in transition order.
    pub fn durations(&self) -> Vec<PhaseDuration> {
        self.transitions
            .windows(2)
            .map(|w| PhaseDuration {
                phase: w[0].0,
                ms: w[1].1 - w[0].1,
            })
            .collect()
    }

    /// Appends an operator-side timing measurement to the log.
    pub fn client_timing(&mut self, phase: String, elapsed_ms: f64) -> Result<(), ApiError> {
        if !(elapsed_ms.is_finite() && elapsed_ms >= 0.0) {
            return Err(self.error(ErrorCode::BadRequest, "elapsed_ms must be a non-negative number"));
        }
        if phase.is_empty() {
            return Err(self.error(ErrorCode::BadRequest, "phase label must not be empty"));
        }
        self.record(LogEvent::ClientTiming { phase, elapsed_ms });
        Ok(())
    }
}

fn phase_label(p: Phase) -> String {
    match p {
        Phase::Created => "created".into(),
        Phase::Initialized => "initialized".into(),
        Phase::Navigating(i) => format!("navigating to plan entry {i}"),
        Phase::ReadyToCapture(i) => format!("ready to capture plan entry {i}"),
        Phase::Captured => "captured".into(),
        Phase::Diagnosed => "diagnosed".into(),
    }
}
