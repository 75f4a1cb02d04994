mod common;

use std::sync::OnceLock;

use common::reward_oracle::brute_force_reward;
use hdl_core::dqn::{
    select_action, train_dqn, Action, CollectionEnv, CollectionPlan, DqnConfig, DqnError, EpisodeTrace, ObservationMode,
    QNetwork, TrainingOutcome, LOCATIONS,
};
use hdl_core::envsim::{Modality, CANONICAL_SEED};
use hdl_core::similarity::SimilarityMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OBS: (usize, usize) = (30, 40);

fn env() -> &'static CollectionEnv {
    static ENV: OnceLock<CollectionEnv> = OnceLock::new();
    ENV.get_or_init(|| CollectionEnv::generate(&[Modality::Image, Modality::Sound], CANONICAL_SEED, OBS.0, OBS.1).unwrap())
}

fn config() -> DqnConfig {
    DqnConfig {
        obs_height: OBS.0,
        obs_width: OBS.1,
        ..DqnConfig::default()
    }
}

fn trained() -> &'static TrainingOutcome {
    static RUN: OnceLock<TrainingOutcome> = OnceLock::new();
    RUN.get_or_init(|| train_dqn(env(), &config(), 0).unwrap())
}

fn oracle_total(visited: &[usize]) -> f64 {
    if visited.is_empty() {
        return 0.0;
    }
    let mats: Vec<&SimilarityMatrix> = visited.iter().map(|&z| env().matrix(z)).collect();
    brute_force_reward(&mats).2
}

#[test]
fn full_resolution_views() {
    let env = env();
    for z in [0, 9] {
        let v = env.observe(z, ObservationMode::ConditionAverage);
        assert_eq!(v.shape(), &[3, 120, 160]);
        assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(v, env.observe(z, ObservationMode::ConditionAverage));
    }
}

#[test]
fn revisit_ends_the_episode_without_reward() {
    let env = env();
    let mut trace = EpisodeTrace::default();
    let first = env.step(&mut trace, env.action_of(4)).unwrap();
    assert_eq!(trace.visited, vec![4]);
    assert!(!first.terminal);
    env.step(&mut trace, env.action_of(9)).unwrap();
    let before = trace.clone();
    let again = env.step(&mut trace, env.action_of(4)).unwrap();
    assert!(again.terminal && again.revisit);
    assert_eq!(again.delta, 0.0);
    assert_eq!(trace.visited, before.visited);
    assert_eq!(trace.rewards, before.rewards);
    assert!(matches!(env.step(&mut trace, env.action_of(1)), Err(DqnError::TerminalEpisode)));
}

#[test]
fn best_single_state_matches_exhaustive_sweep() {
    let env = env();
    let totals: Vec<f64> = (0..16).map(|z| oracle_total(&[z])).collect();
    let best = (0..16).max_by(|&a, &b| totals[a].total_cmp(&totals[b])).unwrap();
    assert_eq!(env.states()[best].id(), "far-0-snd");
    let s = env.matrix(best);
    let mean = s.mean_off_diagonal();
    let worst_class = (0..s.m)
        .map(|i| (0..s.m).filter(|&j| j != i).map(|j| s.get(i, j)).sum::<f64>() / (s.m - 1) as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((totals[best] - (-mean - worst_class - 1.0 / 3.0)).abs() < 1e-12);
    let means: Vec<f64> = (0..16).map(|z| env.matrix(z).mean_off_diagonal()).collect();
    let min_mean = (0..16).min_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
    assert_eq!(min_mean, best);
}

#[test]
fn uniform_exploration_at_full_epsilon() {
    let env = env();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let qnet = QNetwork::new(2, OBS.0, OBS.1, &mut rng).unwrap();
    let obs = env.observation(0, &EpisodeTrace::default());
    let draws = 16_000;
    let mut counts = [0usize; 16];
    for _ in 0..draws {
        let a = select_action(&qnet, &obs, 1.0, &mut rng).unwrap();
        counts[env.state_index(a).unwrap()] += 1;
    }
    let expected = draws as f64 / 16.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 15 degrees of freedom; 37.7 is the 0.001 upper quantile.
    assert!(chi2 < 37.7, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn zero_epsilon_is_the_greedy_argmax() {
    let env = env();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let qnet = QNetwork::new(2, OBS.0, OBS.1, &mut rng).unwrap();
    for z in 0..16 {
        let trace = EpisodeTrace {
            visited: vec![z],
            ..Default::default()
        };
        let obs = env.observation(z, &trace);
        let q = qnet.q_values(&[&obs]).unwrap();
        let row = q.data();
        let expect = Action {
            location: hdl_core::dqn::argmax(&row[..LOCATIONS]),
            modality: hdl_core::dqn::argmax(&row[LOCATIONS..]),
        };
        for _ in 0..3 {
            assert_eq!(select_action(&qnet, &obs, 0.0, &mut rng).unwrap(), expect);
        }
    }
}

#[test]
fn training_run_contract() {
    let out = trained();
    let env = env();
    assert_eq!(out.rewards.len(), 100);
    assert!(out.losses.iter().all(|l| l.is_finite()));
    out.plan.validate().unwrap();
    let visited: Vec<usize> = out.plan.states().iter().map(|s| env.states().iter().position(|t| t == s).unwrap()).collect();
    assert_eq!(visited, out.final_trace.visited);
    assert!((out.plan.reward - oracle_total(&visited)).abs() < 1e-12);
    assert_eq!(*out.rewards.last().unwrap(), out.plan.reward);
    let again = train_dqn(env, &config(), 0).unwrap();
    assert_eq!(again.plan, out.plan);
    assert_eq!(again.rewards, out.rewards);
}

#[test]
fn trained_greedy_policy_is_deterministic() {
    let out = trained();
    let env = env();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for z in 0..16 {
        let obs = env.observation(z, &EpisodeTrace::default());
        let a = out.qnet.greedy(&obs).unwrap();
        for _ in 0..3 {
            assert_eq!(select_action(&out.qnet, &obs, 0.0, &mut rng).unwrap(), a);
        }
    }
}

#[test]
fn plan_manifest_and_reward_csv() {
    let out = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.json");
    out.plan.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let first = &v["plan"][0];
    assert!(first["distance"].is_string() && first["angle"].is_u64() && first["modality"].is_string());
    assert_eq!(CollectionPlan::load(&path).unwrap(), out.plan);
    let csv = dir.path().join("rewards.csv");
    hdl_core::dqn::write_reward_csv(&csv, &out.rewards).unwrap();
    let lines: Vec<String> = std::fs::read_to_string(csv).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 101);
    assert_eq!(lines[0], "episode,total_reward");
}

fn action_sequence() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..16, 1..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reward_deltas_telescope(actions in action_sequence()) {
        let env = env();
        let mut trace = EpisodeTrace::default();
        let mut sum = 0.0;
        for &a in &actions {
            if trace.terminal {
                break;
            }
            sum += env.step(&mut trace, env.action_of(a)).unwrap().delta;
        }
        prop_assert!((sum - oracle_total(&trace.visited)).abs() < 1e-9);
    }

    #[test]
    fn appending_a_state_is_bounded(actions in action_sequence()) {
        let env = env();
        let mut trace = EpisodeTrace::default();
        let mut prev: Option<hdl_core::similarity::RewardBreakdown> = None;
        for &a in &actions {
            if trace.terminal {
                break;
            }
            let out = env.step(&mut trace, env.action_of(a)).unwrap();
            if out.revisit {
                break;
            }
            let now = *trace.rewards.last().unwrap();
            let (r1, r2, pen) = prev.map_or((0.0, 0.0, 0.0), |p| (p.r1, p.r2, p.n_penalty));
            prop_assert!((now.n_penalty - pen - 1.0 / 3.0).abs() < 1e-12);
            prop_assert_eq!(now.n_penalty, trace.visited.len() as f64 / 3.0);
            let (d1, d2) = ((now.r1 - r1).abs(), (now.r2 - r2).abs());
            prop_assert!(d1 <= 1.0 && d2 <= 1.0);
            prop_assert!(out.delta.abs() <= d1 + d2 + 1.0 / 3.0 + 1e-12);
            prev = Some(now);
        }
    }
}
