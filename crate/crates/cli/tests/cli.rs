use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use hdl_core::dqn::CollectionPlan;
use hdl_core::envsim::store::DatasetIndex;
use hdl_core::envsim::{Modality, Provenance};
use serde_json::Value;
use tempfile::TempDir;

const STATES: usize = 16;
const CONDITIONS: usize = 6;

fn hdl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdl")).current_dir(dir).args(args).output().unwrap()
}

fn success(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn failure(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    let value: Value = serde_json::from_str(text.trim()).unwrap();
    assert!(value["error"].as_str().is_some_and(|m| !m.is_empty()), "{value}");
    value
}

/// Data, plan and weights produced once through the binary.
struct Pipeline {
    dir: TempDir,
}

impl Pipeline {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn pipeline() -> &'static Pipeline {
    static PIPELINE: OnceLock<Pipeline> = OnceLock::new();
    PIPELINE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.json"), r#"{"dqn": {"obs_height": 30, "obs_width": 40}}"#).unwrap();
        for args in [
            &["gen-data", "--data-dir", "data"][..],
            &["train-dqn", "--data-dir", "data", "--plan", "art/plan.json", "--config", "run.json"],
            &["train-protonet", "--plan", "art/plan.json", "--weights", "art/model.hdlw"],
        ] {
            success(&hdl(dir.path(), args));
        }
        Pipeline { dir }
    })
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn gen_data_is_complete_and_reproducible() {
    let p = pipeline();
    let index = DatasetIndex::load(&p.path("data")).unwrap();
    assert_eq!(index.entries.len(), 2 * STATES * CONDITIONS);
    for provenance in [Provenance::Virtual, Provenance::Field] {
        let ids = index.state_ids(provenance);
        assert_eq!(ids.len(), STATES);
        for id in &ids {
            let n = index.entries.iter().filter(|e| e.provenance == provenance && &e.state == id).count();
            assert_eq!(n, CONDITIONS, "{id}");
        }
    }
    let again = tempfile::tempdir().unwrap();
    success(&hdl(again.path(), &["gen-data", "--data-dir", "data"]));
    let original = read_tree(&p.path("data"));
    let rerun = read_tree(&again.path().join("data"));
    for (name, bytes) in &rerun {
        assert_eq!(original.get(name), Some(bytes), "{}", name.display());
    }
    assert!(rerun.len() > 2 * STATES * CONDITIONS);
}

#[test]
fn eval_grid_reports_sound_minimum_and_negative_trend() {
    let p = pipeline();
    let out = success(&hdl(p.dir.path(), &["eval-grid", "--data-dir", "data"]));
    assert_eq!(out["rows"], STATES);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(p.path("data/grid.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), STATES);
    let min = rows.iter().min_by(|a, b| a["mean_ssim"].as_f64().unwrap().total_cmp(&b["mean_ssim"].as_f64().unwrap())).unwrap();
    assert_eq!(min["modality"], "sound");
    assert_eq!(out["min_ssim_state"], min["state"]);
    assert!(out["spearman"].as_f64().unwrap() <= -0.6, "{out}");
    assert!(p.path("data/grid.txt").exists());
}

#[test]
fn eval_grid_without_dataset_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let err = failure(&hdl(dir.path(), &["eval-grid", "--data-dir", "nowhere"]));
    assert_eq!(err["command"], "eval-grid");
    assert!(err["error"].as_str().unwrap().contains("nowhere"), "{err}");
}

#[test]
fn train_dqn_writes_plan_and_reward_table() {
    let p = pipeline();
    let plan = CollectionPlan::load(&p.path("art/plan.json")).unwrap();
    assert!(!plan.plan.is_empty());
    assert!(plan.weights_fingerprint.is_some());
    let csv = std::fs::read_to_string(p.path("art/plan.rewards.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
}

#[test]
fn diagnose_predicts_the_simulated_condition() {
    let p = pipeline();
    let plan = CollectionPlan::load(&p.path("art/plan.json")).unwrap();
    assert!(plan.states().iter().all(|s| s.modality == Modality::Sound || s.modality == Modality::Image));
    let out = success(&hdl(
        p.dir.path(),
        &["diagnose", "--plan", "art/plan.json", "--weights", "art/model.hdlw", "--condition", "one-blade"],
    ));
    assert_eq!(out["command"], "diagnose");
    assert_eq!(out["ground_truth"], "one-blade");
    assert_eq!(out["result"]["predicted"], "one-blade", "{out}");
    assert_eq!(out["correct"], true);
}

#[test]
fn fingerprint_mismatch_is_a_hard_error() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let mut plan = CollectionPlan::load(&p.path("art/plan.json")).unwrap();
    plan.weights_fingerprint = Some("0".repeat(64));
    plan.save(&dir.path().join("plan.json")).unwrap();
    let weights = p.path("art/model.hdlw");
    let err = failure(&hdl(
        dir.path(),
        &["diagnose", "--plan", "plan.json", "--weights", weights.to_str().unwrap()],
    ));
    assert_eq!(err["command"], "diagnose");
    assert!(err["error"].as_str().unwrap().to_lowercase().contains("fingerprint"), "{err}");
}

#[test]
fn missing_weights_are_named() {
    let p = pipeline();
    let err = failure(&hdl(p.dir.path(), &["diagnose", "--plan", "art/plan.json", "--weights", "art/absent.hdlw"]));
    assert!(err["error"].as_str().unwrap().contains("absent.hdlw"), "{err}");
}

#[test]
fn serve_answers_health_checks() {
    let p = pipeline();
    std::fs::write(p.path("serve.json"), r#"{"bind": "127.0.0.1:0"}"#).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_hdl"))
        .current_dir(p.dir.path())
        .args(["serve", "--plan", "art/plan.json", "--weights", "art/model.hdlw", "--config", "serve.json"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let ready: Value = serde_json::from_str(line.trim()).unwrap();
    let addr = ready["listening"].as_str().unwrap().to_string();
    let mut stream = TcpStream::connect(&addr).unwrap();
    stream.write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"ok\""));
}

#[test]
fn bad_arguments_fail_as_json() {
    let dir = tempfile::tempdir().unwrap();
    failure(&hdl(dir.path(), &["frobnicate"]));
    let err = failure(&hdl(dir.path(), &["diagnose", "--condition", "four-holes"]));
    assert!(err["error"].as_str().unwrap().contains("four-holes"), "{err}");
    std::fs::write(dir.path().join("bad.json"), r#"{"epoch": 3}"#).unwrap();
    let err = failure(&hdl(dir.path(), &["gen-data", "--config", "bad.json"]));
    assert_eq!(err["command"], "gen-data");
}
