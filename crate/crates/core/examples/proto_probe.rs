//! Trains the few-shot classifier on one plan and prints its field metrics.
//!
//! `cargo run --release -p hdl-core --example proto_probe [state-ids...]`

use std::time::Instant;

use hdl_core::envsim::{CollectionState, CANONICAL_SEED};
use hdl_core::protonet::{evaluate, field_queries, train_protonet, FewShotTask, ProtoConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ids: Vec<String> = std::env::args().skip(1).collect();
    let states: Vec<CollectionState> = if ids.is_empty() {
        vec!["far-0-snd".parse()?]
    } else {
        ids.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    };
    let config: ProtoConfig = match std::env::var("PROTO_CONFIG") {
        Ok(json) => serde_json::from_str(&json)?,
        Err(_) => ProtoConfig::default(),
    };
    let seeds: u64 = std::env::var("SEEDS").ok().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let t = Instant::now();
    let task = FewShotTask::generate(&states, CANONICAL_SEED, config.query_pool)?;
    let queries = field_queries(&states, CANONICAL_SEED, config.eval_shots)?;
    eprintln!("data in {:.1?}", t.elapsed());
    for seed in 0..seeds {
        let t = Instant::now();
        let trained = train_protonet(&task, &config, seed)?;
        let report = evaluate(&trained.model, &queries)?;
        let l: Vec<String> = trained.losses.iter().step_by(10).map(|v| format!("{v:.3}")).collect();
        println!(
            "seed {seed}: P {:.3} R {:.3} in {:.1?}; loss {l:?}",
            report.precision,
            report.recall,
            t.elapsed()
        );
    }
    Ok(())
}
