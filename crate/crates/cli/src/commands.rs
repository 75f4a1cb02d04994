//! Subcommand bodies. Each returns a JSON summary printed as one line.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use hdl_core::dqn::{train_dqn, write_reward_csv, CollectionEnv, CollectionPlan};
use hdl_core::envsim::store::{load_dataset, write_dataset, DatasetIndex, INDEX_FILE};
use hdl_core::envsim::{build_dataset, enumerate_states, Condition, LabeledDataset, Provenance};
use hdl_core::grid::{evaluate_grid, sweep_config};
use hdl_core::protonet::{evaluate, field_queries, train_protonet, FewShotTask};
use hdl_service::{condition_for_seed, run_headless, serve, ArtifactSource, Artifacts, SessionStore};
use serde_json::{json, Value};

use crate::config::RunConfig;

pub const GRID_JSON: &str = "grid.json";
pub const GRID_TEXT: &str = "grid.txt";

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn require(kind: &str, path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        bail!("missing {kind}: {}", path.display());
    }
    Ok(())
}

fn load_virtual(run: &RunConfig) -> anyhow::Result<LabeledDataset> {
    require("dataset", &run.data_dir.join(INDEX_FILE))?;
    load_dataset(&run.data_dir, Provenance::Virtual, &enumerate_states(), 1)
        .with_context(|| format!("dataset {}", run.data_dir.display()))
}

/// Path of the per-episode reward table written next to a plan manifest.
pub fn reward_csv_path(plan: &Path) -> std::path::PathBuf {
    plan.with_extension("rewards.csv")
}

pub fn gen_data(run: &RunConfig) -> anyhow::Result<Value> {
    let root = &run.data_dir;
    fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
    let states = enumerate_states();
    let mut index = DatasetIndex::default();
    for provenance in [Provenance::Virtual, Provenance::Field] {
        let dataset = build_dataset(&states, provenance, 1, run.seed)?;
        let entries = write_dataset(root, &dataset).with_context(|| format!("cannot write {}", root.display()))?;
        index.entries.extend(entries);
    }
    index.save(root).with_context(|| format!("cannot write index in {}", root.display()))?;
    Ok(json!({
        "command": "gen-data",
        "data_dir": root,
        "seed": run.seed,
        "samples": index.entries.len(),
    }))
}

pub fn eval_grid(run: &RunConfig) -> anyhow::Result<Value> {
    let dataset = load_virtual(run)?;
    // Field queries must come from the generator seed the data was made with.
    let seed = dataset.samples()[0].seed;
    let mut config = sweep_config();
    if let Some(epochs) = run.epochs {
        config.epochs = epochs;
    }
    let report = evaluate_grid(&dataset.preprocess()?, seed, &config)?;
    let json_path = run.data_dir.join(GRID_JSON);
    fs::write(&json_path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("cannot write {}", json_path.display()))?;
    fs::write(run.data_dir.join(GRID_TEXT), report.to_text())?;
    Ok(json!({
        "command": "eval-grid",
        "report": json_path,
        "rows": report.rows.len(),
        "min_ssim_state": report.min_ssim().map(|r| r.state.clone()),
        "spearman": report.spearman,
    }))
}

pub fn train_dqn_cmd(run: &RunConfig) -> anyhow::Result<Value> {
    let data = load_virtual(run)?.preprocess()?;
    let env = CollectionEnv::from_dataset(data, run.dqn.obs_height, run.dqn.obs_width)?;
    let outcome = train_dqn(&env, &run.dqn, run.seed)?;
    ensure_parent(&run.plan)?;
    outcome.plan.save(&run.plan).with_context(|| format!("cannot write {}", run.plan.display()))?;
    let csv = reward_csv_path(&run.plan);
    write_reward_csv(&csv, &outcome.rewards).with_context(|| format!("cannot write {}", csv.display()))?;
    Ok(json!({
        "command": "train-dqn",
        "plan": run.plan,
        "states": outcome.plan.states().iter().map(|s| s.id()).collect::<Vec<_>>(),
        "reward": outcome.plan.reward,
        "rewards_csv": csv,
    }))
}

pub fn train_protonet_cmd(run: &RunConfig) -> anyhow::Result<Value> {
    require("plan", &run.plan)?;
    let mut plan = CollectionPlan::load(&run.plan).with_context(|| format!("plan {}", run.plan.display()))?;
    let states = plan.states();
    let task = FewShotTask::generate(&states, run.seed, run.protonet.query_pool)?;
    let trained = train_protonet(&task, &run.protonet, run.seed)?;
    let report = evaluate(&trained.model, &field_queries(&states, run.seed, run.protonet.eval_shots)?)?;
    ensure_parent(&run.weights)?;
    trained
        .model
        .save(&run.weights)
        .with_context(|| format!("cannot write {}", run.weights.display()))?;
    let fingerprint = trained.model.fingerprint();
    plan.weights_fingerprint = Some(fingerprint.clone());
    plan.save(&run.plan).with_context(|| format!("cannot write {}", run.plan.display()))?;
    Ok(json!({
        "command": "train-protonet",
        "weights": run.weights,
        "weights_fingerprint": fingerprint,
        "final_loss": trained.losses.last(),
        "field_precision": report.precision,
        "field_recall": report.recall,
    }))
}

fn load_artifacts(run: &RunConfig) -> anyhow::Result<Arc<Artifacts>> {
    require("weights", &run.weights)?;
    require("plan", &run.plan)?;
    if let Some(map) = &run.map {
        require("map", map)?;
    }
    Ok(Arc::new(Artifacts::load(&run.weights, &run.plan, run.map.as_deref(), run.scan_threshold)?))
}

pub fn diagnose(run: &RunConfig, condition: Option<Condition>) -> anyhow::Result<Value> {
    let artifacts = load_artifacts(run)?;
    let condition = condition.unwrap_or_else(|| condition_for_seed(run.seed));
    let outcome = run_headless(artifacts, condition, run.seed).map_err(|e| anyhow::anyhow!("{}", e.message))?;
    let mut value = serde_json::to_value(&outcome)?;
    value["command"] = json!("diagnose");
    value["correct"] = json!(outcome.result.predicted == outcome.ground_truth);
    Ok(value)
}

/// Loads the artifacts up front so a missing file fails the command rather
/// than the first session.
pub fn serve_cmd(run: &RunConfig) -> anyhow::Result<Value> {
    let artifacts = load_artifacts(run)?;
    let service = run.service();
    if let Some(dir) = &service.log_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let store = Arc::new(SessionStore::new(
        ArtifactSource::Loaded(artifacts),
        service.log_dir.clone(),
        service.seed.clone(),
    ));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime
        .block_on(serve(store, &service.bind, |addr| {
            let _ = writeln!(std::io::stdout(), "{}", json!({"command": "serve", "listening": addr.to_string()}));
        }))
        .with_context(|| format!("cannot serve on {}", service.bind))?;
    Ok(json!({"command": "serve", "stopped": true}))
}
