//! One PASS/FAIL line per headline property of the pipeline.
//!
//! Runs with a plain `main` so the lines are printed whether or not
//! the test harness captures output; exits nonzero when any check fails.

#[path = "../../core/tests/common/gradcheck.rs"]
mod gradcheck;
#[allow(dead_code)]
#[path = "../../core/tests/common/reward_oracle.rs"]
mod reward_oracle;
#[path = "../../service/tests/common/mod.rs"]
mod service_common;
#[allow(dead_code)]
#[path = "../../core/tests/common/ucs.rs"]
mod ucs;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use hdl_core::dqn::{train_dqn, CollectionEnv, CollectionPlan, DqnConfig, TrainingOutcome};
use hdl_core::dsp::hz_to_mel;
use hdl_core::envsim::{build_dataset, enumerate_states, CollectionState, Condition, Modality, Provenance, CANONICAL_SEED};
use hdl_core::grid::{evaluate_grid, sweep_config};
use hdl_core::nav::{astar, GridMap, NavError, DEFAULT_SCAN_THRESHOLD};
use hdl_core::protonet::{evaluate, field_queries, train_protonet, FewShotTask, ProtoConfig, ProtoModel};
use hdl_core::similarity::{cross_condition_matrices, reward_from_matrices, ssim, SimilarityMatrix};
use hdl_core::tensor::Tensor;
use hdl_service::{run_headless, usability_coverage, Artifacts};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

const SEEDS: u64 = 10;
const DQN_OBS: (usize, usize) = (30, 40);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
        };
        let detail = detail.replace('\n', " ");
        println!("{tag} | {name} | {detail} [{secs:.1}s]");
    }
}

fn mel() -> Check {
    let at_1k = hz_to_mel(1000.0).map_err(|e| e.to_string())?;
    let at_0 = hz_to_mel(0.0).map_err(|e| e.to_string())?;
    ensure(
        (at_1k - 1000.0).abs() <= 0.5 && at_0 == 0.0,
        format!("hz_to_mel(1000) = {at_1k:.4}, hz_to_mel(0) = {at_0}"),
    )
}

fn gradients() -> Check {
    let mut worst32: f64 = 0.0;
    let mut worst64: f64 = 0.0;
    let mut failed = Vec::new();
    for kind in gradcheck::LAYER_KINDS.iter().chain(&gradcheck::LOSS_KINDS) {
        let e32 = gradcheck::worst_error::<f32>(kind, 20);
        let e64 = gradcheck::worst_error::<f64>(kind, 20);
        worst32 = worst32.max(e32);
        worst64 = worst64.max(e64);
        if !(e32 < 1e-2 && e64 < 1e-4) {
            failed.push(format!("{kind} ({e32:.1e}/{e64:.1e})"));
        }
    }
    ensure(
        failed.is_empty() && gradcheck::covers_every_layer_spec(),
        format!(
            "{} layer + {} loss kinds x 20 instances; worst rel. err. f32 {worst32:.1e}, f64 {worst64:.1e}{}",
            gradcheck::LAYER_KINDS.len(),
            gradcheck::LOSS_KINDS.len(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// SSIM of two equally sized single-window images, from the textbook
/// statistics with `L = 1`.
fn closed_form_ssim(a: &[f32], b: &[f32]) -> f64 {
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let va = a.iter().map(|&v| (v as f64 - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|&v| (v as f64 - mb).powi(2)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb)).sum::<f64>() / n;
    (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

fn ssim_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (a, b) = (random_tensor(&mut rng, &[3, 24, 32]), random_tensor(&mut rng, &[3, 24, 32]));
        let ab = ssim(&a, &b).map_err(|e| e.to_string())?;
        if ssim(&a, &a).unwrap() != 1.0 || ab != ssim(&b, &a).unwrap() {
            return Err("self-similarity or symmetry not exact".into());
        }
        let (x, y) = (random_tensor(&mut rng, &[1, 7, 7]), random_tensor(&mut rng, &[1, 7, 7]));
        worst = worst.max((ssim(&x, &y).unwrap() - closed_form_ssim(x.data(), y.data())).abs());
    }
    ensure(
        worst < 1e-9,
        format!("self = 1 and symmetry exact on 20 pairs; single-window max |diff| {worst:.1e}"),
    )
}

fn canonical_matrices() -> Vec<SimilarityMatrix> {
    let ds = build_dataset(&enumerate_states(), Provenance::Virtual, 1, CANONICAL_SEED)
        .unwrap()
        .preprocess()
        .unwrap();
    cross_condition_matrices(&ds).unwrap()
}

fn reward_oracle_check(mats: &[SimilarityMatrix]) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for k in 0..100 {
        let n = rng.random_range(1..=16);
        let mut order: Vec<usize> = (0..16).collect();
        order.shuffle(&mut rng);
        let plan: Vec<&SimilarityMatrix> = order[..n].iter().map(|&z| &mats[z]).collect();
        let r = reward_from_matrices(&plan).map_err(|e| e.to_string())?;
        let (r1, r2, total) = reward_oracle::brute_force_reward(&plan);
        if (r.r1.to_bits(), r.r2.to_bits(), r.total.to_bits()) != (r1.to_bits(), r2.to_bits(), total.to_bits()) {
            return Err(format!("dataset {k}: {} vs oracle {total}", r.total));
        }
    }
    for s in mats {
        let one = reward_from_matrices(&[s]).unwrap();
        let two = reward_from_matrices(&[s, s]).unwrap();
        let same_terms = (one.r1 - two.r1).abs() < 1e-12 && (one.r2 - two.r2).abs() < 1e-12;
        if !same_terms || two.n_penalty - one.n_penalty != 1.0 / 3.0 {
            return Err("duplicate state changed more than the penalty".into());
        }
    }
    Ok("100 random plans bit-identical to brute force; duplicating a state adds exactly 1/3 penalty".into())
}

fn argmin(values: &[f64]) -> usize {
    (0..values.len()).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap()
}

fn dqn_check(env: &CollectionEnv, runs: &[TrainingOutcome]) -> Check {
    let means: Vec<f64> = (0..env.num_states()).map(|z| env.matrix(z).mean_off_diagonal()).collect();
    let target = env.states()[argmin(&means)];
    let best_total = (0..env.num_states())
        .map(|z| env.reward(&[z]).unwrap().unwrap().total)
        .fold(f64::NEG_INFINITY, f64::max);
    let hits = runs.iter().filter(|r| r.plan.states() == [target]).count();
    let gaps: Vec<String> = runs.iter().map(|r| format!("{:.3}", best_total - r.plan.reward)).collect();
    ensure(
        hits >= 8 && target.modality == Modality::Sound,
        format!(
            "{hits}/{SEEDS} seeds end on [{}] (sound: {}); per-seed gap to best {best_total:.3}: [{}]",
            target.id(),
            target.modality == Modality::Sound,
            gaps.join(", ")
        ),
    )
}

fn end_to_end(states: &[CollectionState]) -> (Check, Option<ProtoModel>) {
    let config = ProtoConfig::default();
    let task = FewShotTask::generate(states, CANONICAL_SEED, config.query_pool).unwrap();
    let queries = field_queries(states, CANONICAL_SEED, config.eval_shots).unwrap();
    let mut perfect = 0;
    let mut scores = Vec::new();
    let mut first = None;
    for seed in 0..SEEDS {
        let trained = train_protonet(&task, &config, seed).unwrap();
        let report = evaluate(&trained.model, &queries).unwrap();
        if report.precision == 1.0 && report.recall == 1.0 {
            perfect += 1;
        }
        scores.push(format!("{:.2}/{:.2}", report.precision, report.recall));
        if seed == 0 {
            first = Some(trained.model);
        }
    }
    let ids: Vec<String> = states.iter().map(|s| s.id()).collect();
    let check = ensure(
        perfect >= 8,
        format!(
            "{perfect}/{SEEDS} seeds reach P = R = 1 on [{}] over {} field queries; P/R per seed [{}]",
            ids.join(", "),
            queries.len(),
            scores.join(", ")
        ),
    );
    (check, first)
}

fn ordering_trend() -> Check {
    let virt = build_dataset(&enumerate_states(), Provenance::Virtual, 1, CANONICAL_SEED)
        .unwrap()
        .preprocess()
        .unwrap();
    let report = evaluate_grid(&virt, CANONICAL_SEED, &sweep_config()).map_err(|e| e.to_string())?;
    let min = report.min_ssim().unwrap();
    let detail = format!(
        "spearman(ssim, recall) = {} over {} states; recall range {:.3}..{:.3}; min-ssim state {}",
        report.spearman.map_or("undefined".into(), |r| format!("{r:.3}")),
        report.rows.len(),
        report.rows.iter().map(|r| r.recall).fold(f64::INFINITY, f64::min),
        report.rows.iter().map(|r| r.recall).fold(f64::NEG_INFINITY, f64::max),
        min.state
    );
    ensure(report.spearman.is_some_and(|r| r <= -0.6) && report.rows.len() == 16, detail)
}

fn train_test_similarity(mats: &[SimilarityMatrix]) -> Check {
    let states = enumerate_states();
    let means: Vec<f64> = mats.iter().map(|m| m.mean_off_diagonal()).collect();
    let best = states[argmin(&means)];
    let mut total = 0.0;
    for c in Condition::ALL {
        let v = hdl_core::envsim::generate_sample(best, c, Provenance::Virtual, CANONICAL_SEED).preprocess().unwrap();
        let f = hdl_core::envsim::generate_sample(best, c, Provenance::Field, CANONICAL_SEED).preprocess().unwrap();
        total += ssim(&v, &f).unwrap();
    }
    let mean = total / Condition::ALL.len() as f64;
    ensure((0.94..=0.98).contains(&mean), format!("mean Virtual/Field SSIM at {} = {mean:.4}", best.id()))
}

fn astar_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let (mut solvable, mut unsolvable) = (0, 0);
    for k in 0..50 {
        let blocked_p = if k % 5 == 4 { 0.45 } else { 0.2 };
        let mut open: Vec<Vec<bool>> = (0..20).map(|_| (0..20).map(|_| !rng.random_bool(blocked_p)).collect()).collect();
        let start = (rng.random_range(0..20), rng.random_range(0..20));
        let goal = (rng.random_range(0..20), rng.random_range(0..20));
        open[start.0][start.1] = true;
        open[goal.0][goal.1] = true;
        let blocked = (0..20).flat_map(|r| (0..20).map(move |c| (r, c))).filter(|&(r, c)| !open[r][c]);
        let map = GridMap::new(20, 20, blocked, BTreeMap::new(), start).unwrap();
        match (astar(&map, start, goal), ucs::ucs(&open, start, goal)) {
            (Ok(path), Some(oracle)) if path.cost() == oracle.cost => solvable += 1,
            (Err(NavError::NoPath { .. }), None) => unsolvable += 1,
            (a, b) => {
                return Err(format!(
                    "grid {k}: astar {:?} vs oracle {:?}",
                    a.map(|p| p.cost()),
                    b.map(|o| o.cost)
                ))
            }
        }
    }
    Ok(format!("50 random 20x20 grids: {solvable} solvable with equal cost, {unsolvable} NoPath agreements"))
}

fn usability() -> Check {
    let v = usability_coverage(0.31, 5).map_err(|e| e.to_string())?;
    ensure((v - 0.8436).abs() <= 1e-4, format!("usability_coverage(0.31, 5) = {v:.6}"))
}

fn service_check(artifacts: Arc<Artifacts>) -> Check {
    let stats = service_common::fuzz::fuzz_sessions(&[artifacts.clone(), service_common::triple()], 1000);
    let mut correct = 0;
    for condition in Condition::ALL {
        let runs: Vec<_> = (0..3)
            .map(|_| run_headless(artifacts.clone(), condition, 7).map_err(|e| e.message))
            .collect::<Result<_, _>>()?;
        if runs.iter().any(|r| r.result != runs[0].result) {
            return Err(format!("headless {condition} runs disagree"));
        }
        correct += usize::from(runs[0].result.predicted == condition);
    }
    Ok(format!(
        "1000 fuzzed sequences ({} calls, {} rejected without mutation, {} diagnosed) consistent; \
         headless sessions identical across 3 runs for all 6 conditions ({correct}/6 correct)",
        stats.calls, stats.rejected, stats.diagnosed
    ))
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };
    report.check("Mel formula", mel);
    report.check("Gradient suite", gradients);
    report.check("SSIM", ssim_checks);
    let mats = canonical_matrices();
    report.check("Reward oracle", || reward_oracle_check(&mats));

    let env = CollectionEnv::generate(&[Modality::Image, Modality::Sound], CANONICAL_SEED, DQN_OBS.0, DQN_OBS.1).unwrap();
    let config = DqnConfig {
        obs_height: DQN_OBS.0,
        obs_width: DQN_OBS.1,
        ..DqnConfig::default()
    };
    let runs: Vec<TrainingOutcome> = (0..SEEDS).map(|seed| train_dqn(&env, &config, seed).unwrap()).collect();
    report.check("DQN convergence", || dqn_check(&env, &runs));

    let canonical_plan: CollectionPlan = runs[0].plan.clone();
    let mut model = None;
    report.check("End-to-end diagnosis", || {
        let (check, first) = end_to_end(&canonical_plan.states());
        model = first;
        check
    });
    report.check("Ordering trend", ordering_trend);
    report.check("Train/test similarity", || train_test_similarity(&mats));
    report.check("A* vs uniform-cost search", astar_check);
    report.check("Usability model", usability);
    report.check("Service state machine", || {
        let model = model.take().ok_or("no trained diagnosis model")?;
        let mut plan = canonical_plan.clone();
        plan.weights_fingerprint = Some(model.fingerprint());
        let artifacts = Artifacts::new(model, plan, GridMap::default_map(), DEFAULT_SCAN_THRESHOLD).map_err(|e| e.to_string())?;
        service_check(Arc::new(artifacts))
    });
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
