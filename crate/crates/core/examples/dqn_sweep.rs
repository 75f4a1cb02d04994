//! Trains the collection agent on several seeds and prints each plan.
//!
//! `cargo run --release -p hdl-core --example dqn_sweep [seeds]`

use std::time::Instant;

use hdl_core::dqn::{train_dqn, CollectionEnv, DqnConfig, EpisodeTrace};
use hdl_core::envsim::{Modality, CANONICAL_SEED};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let config: DqnConfig = match std::env::var("DQN_CONFIG") {
        Ok(json) => serde_json::from_str(&json)?,
        Err(_) => DqnConfig {
            obs_height: 30,
            obs_width: 40,
            ..DqnConfig::default()
        },
    };
    let verbose = std::env::var("VERBOSE").is_ok();
    let env = CollectionEnv::generate(&[Modality::Image, Modality::Sound], CANONICAL_SEED, config.obs_height, config.obs_width)?;
    if let Ok(path) = std::env::var("DUMP_MATS") {
        let mats: Vec<Vec<Vec<f64>>> = (0..env.num_states())
            .map(|z| (0..6).map(|i| (0..6).map(|j| env.matrix(z).get(i, j)).collect()).collect())
            .collect();
        std::fs::write(path, serde_json::to_string(&mats)?)?;
        return Ok(());
    }
    let mut hits = 0;
    let only: Option<Vec<u64>> = std::env::var("ONLY").ok().map(|v| v.split(',').map(|x| x.parse().unwrap()).collect());
    for seed in 0..seeds {
        if only.as_ref().is_some_and(|o| !o.contains(&seed)) {
            continue;
        }
        let t = Instant::now();
        let out = train_dqn(&env, &config, seed)?;
        let ids: Vec<String> = out.plan.states().iter().map(|s| s.id()).collect();
        if ids == ["far-0-snd"] {
            hits += 1;
        }
        println!("seed {seed}: {ids:?} reward {:.4} in {:.1?}", out.plan.reward, t.elapsed());
        if verbose {
            let l: Vec<String> = out.losses.iter().step_by(10).map(|v| format!("{v:.3}")).collect();
            println!("  loss {l:?}");
            let empty = env.observation(9, &EpisodeTrace::default());
            let q = out.qnet.q_values(&[&empty])?;
            println!("  q(empty) {:?}", q.data().iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
            let firsts: Vec<usize> = (0..env.num_states())
                .map(|p| env.state_index(out.qnet.greedy(&env.observation(p, &EpisodeTrace::default())).unwrap()).unwrap())
                .collect();
            println!("  first action by position {firsts:?}");
            let r: Vec<String> = out.rewards.iter().skip(60).map(|v| format!("{v:.2}")).collect();
            println!("  late rewards {r:?}");
            let one = EpisodeTrace { visited: vec![9], ..Default::default() };
            let q = out.qnet.q_values(&[&env.observation(9, &one)])?;
            println!("  q([9])   {:?}", q.data().iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
        }
    }
    println!("{hits}/{seeds} reached far-0-snd");
    Ok(())
}
