#![allow(dead_code)]

pub mod fuzz;

use std::collections::{BTreeSet, VecDeque};
use std::sync::{Arc, OnceLock};

use hdl_core::dqn::{CollectionPlan, PlanEntry};
use hdl_core::envsim::{CollectionState, CANONICAL_SEED};
use hdl_core::nav::{Cell, GridMap, DEFAULT_SCAN_THRESHOLD};
use hdl_core::protonet::{train_protonet, FewShotTask, ProtoConfig, ProtoModel};
use hdl_service::Artifacts;

pub const SINGLE: &[&str] = &["far-0-snd"];
/// Two entries share a pose, so the second leg starts at its anchor.
pub const TRIPLE: &[&str] = &["near-90-img", "near-90-snd", "far-0-snd"];

pub fn plan_of(ids: &[&str]) -> CollectionPlan {
    CollectionPlan {
        plan: ids.iter().map(|id| PlanEntry::from(id.parse::<CollectionState>().unwrap())).collect(),
        seed: 0,
        reward: 0.0,
        weights_fingerprint: None,
    }
}

/// A briefly trained model: the session logic does not depend on accuracy.
pub fn quick_model(ids: &[&str]) -> ProtoModel {
    let states: Vec<CollectionState> = ids.iter().map(|id| id.parse().unwrap()).collect();
    let config = ProtoConfig {
        epochs: 1,
        queries_per_class: 1,
        query_pool: 1,
        ..ProtoConfig::default()
    };
    let task = FewShotTask::generate(&states, CANONICAL_SEED, config.query_pool).unwrap();
    train_protonet(&task, &config, 0).unwrap().model
}

fn build(ids: &[&str]) -> Arc<Artifacts> {
    let model = quick_model(ids);
    let mut plan = plan_of(ids);
    plan.weights_fingerprint = Some(model.fingerprint());
    Arc::new(Artifacts::new(model, plan, GridMap::default_map(), DEFAULT_SCAN_THRESHOLD).unwrap())
}

pub fn single() -> Arc<Artifacts> {
    static A: OnceLock<Arc<Artifacts>> = OnceLock::new();
    A.get_or_init(|| build(SINGLE)).clone()
}

pub fn triple() -> Arc<Artifacts> {
    static A: OnceLock<Arc<Artifacts>> = OnceLock::new();
    A.get_or_init(|| build(TRIPLE)).clone()
}

/// Breadth-first step distance, independent of the A* implementation.
pub fn bfs_distance(map: &GridMap, from: Cell, to: Cell) -> Option<usize> {
    let mut seen = BTreeSet::from([from]);
    let mut queue = VecDeque::from([(from, 0)]);
    while let Some((cell, d)) = queue.pop_front() {
        if cell == to {
            return Some(d);
        }
        let (r, c) = cell;
        let around = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
        for next in around {
            if map.in_bounds(next) && map.is_open(next) && seen.insert(next) {
                queue.push_back((next, d + 1));
            }
        }
    }
    None
}

pub fn anchor_of(artifacts: &Artifacts, step: usize) -> Cell {
    artifacts.map.anchor(artifacts.plan.plan[step].state().location()).unwrap().cell
}
