//! Random call sequences against a session, checked after every call.

use std::sync::Arc;

use hdl_core::envsim::Condition;
use hdl_core::nav::{Cell, Instruction};
use hdl_service::session::{LogEvent, Snapshot};
use hdl_service::{localization_scan, Artifacts, Phase, Session};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uuid::Uuid;

use super::anchor_of;

/// Invariants tying the phase to the rest of the session state.
fn check_consistent(s: &Session, a: &Artifacts) {
    let snap = s.snapshot();
    let len = a.plan.plan.len();
    assert!(a.map.is_open(snap.cell));
    match snap.phase {
        Phase::Created | Phase::Initialized => {
            assert_eq!(snap.cell, a.map.start());
            assert_eq!(snap.captures, 0);
        }
        Phase::Navigating(i) => {
            assert_eq!(snap.captures, i);
            assert_ne!(snap.cell, anchor_of(a, i));
        }
        Phase::ReadyToCapture(i) => {
            assert_eq!(snap.captures, i);
            assert_eq!(snap.cell, anchor_of(a, i));
        }
        Phase::Captured | Phase::Diagnosed => assert_eq!(snap.captures, len),
    }
    assert_eq!(snap.diagnosed, snap.phase == Phase::Diagnosed);
    let mut last: Option<Phase> = None;
    for e in s.log() {
        if let LogEvent::Transition { from, to } = e.event {
            assert_eq!(from, last);
            if let Some(prev) = last {
                assert!(prev.allows(to, len), "{prev:?} -> {to:?}");
            }
            last = Some(to);
        }
    }
    assert_eq!(last, Some(snap.phase));
}

#[derive(Clone, Copy, Debug)]
enum Call {
    Initialize,
    Instructions,
    Move,
    Capture,
    Diagnose,
    Timing,
}

fn progress_call(phase: Phase) -> Call {
    match phase {
        Phase::Created => Call::Initialize,
        Phase::Initialized | Phase::Navigating(_) => Call::Move,
        Phase::ReadyToCapture(_) => Call::Capture,
        Phase::Captured | Phase::Diagnosed => Call::Diagnose,
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FuzzStats {
    pub calls: usize,
    pub rejected: usize,
    pub diagnosed: usize,
}

/// Drives `cases` random call sequences, alternating over `plans`, and
/// panics on the first inconsistency.
pub fn fuzz_sessions(plans: &[Arc<Artifacts>], cases: u64) -> FuzzStats {
    let calls = [Call::Initialize, Call::Instructions, Call::Move, Call::Move, Call::Move, Call::Capture, Call::Diagnose, Call::Timing];
    let mut stats = FuzzStats::default();
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let a = &plans[case as usize % plans.len()];
        let condition = Condition::ALL[rng.random_range(0..6)];
        let mut s = Session::new(Uuid::from_u64_pair(1, case), a.clone(), condition, case);
        check_consistent(&s, a);
        for _ in 0..rng.random_range(1..120) {
            let call = if rng.random_bool(0.5) { progress_call(s.phase()) } else { *calls.choose(&mut rng).unwrap() };
            let before: Snapshot = s.snapshot();
            stats.calls += 1;
            let outcome = match call {
                Call::Initialize => {
                    let scan: Vec<Cell> = if rng.random_bool(0.6) {
                        localization_scan(&a.map, a.scan_threshold)
                    } else {
                        (0..rng.random_range(0..5)).map(|_| (rng.random_range(0..15), rng.random_range(0..15))).collect()
                    };
                    s.initialize(&scan).map(|_| ())
                }
                Call::Instructions => s.instructions().map(|_| ()),
                Call::Move => {
                    let next = match (s.phase(), rng.random_bool(0.7)) {
                        (Phase::Navigating(_), true) => match s.instructions().unwrap().current {
                            Some(Instruction::Navigate { waypoints, .. }) => waypoints[1],
                            _ => unreachable!(),
                        },
                        _ => {
                            let (r, c) = s.cell();
                            let d: [(isize, isize); 6] = [(-1, 0), (1, 0), (0, -1), (0, 1), (1, 1), (0, 2)];
                            let (dr, dc) = *d.choose(&mut rng).unwrap();
                            ((r as isize + dr).max(0) as usize, (c as isize + dc).max(0) as usize)
                        }
                    };
                    s.move_to(next).map(|_| ())
                }
                Call::Capture => s.capture().map(|_| ()),
                Call::Diagnose => s.diagnose().map(|_| ()),
                Call::Timing => {
                    let ms = if rng.random_bool(0.8) { rng.random_range(0.0..1e4) } else { -1.0 };
                    s.client_timing("operator".into(), ms)
                }
            };
            match outcome {
                Err(e) => {
                    stats.rejected += 1;
                    assert_eq!(s.snapshot(), before, "case {case}: rejected {call:?} mutated state");
                    assert_eq!(e.phase, Some(before.phase));
                }
                Ok(()) => {
                    if let Call::Instructions = call {
                        assert_eq!(s.snapshot(), before);
                    }
                }
            }
            check_consistent(&s, a);
        }
        stats.diagnosed += usize::from(s.phase() == Phase::Diagnosed);
    }
    stats
}
