//! `hdl`: data generation, training, evaluation and serving.
//!
//! Every subcommand prints one JSON line on success. Failures print one JSON
//! line `{"error": ..., "command": ...}` on stderr and exit nonzero.

mod commands;
mod config;

use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hdl_core::envsim::Condition;
use serde_json::json;

use config::{Flags, RunConfig};

#[derive(Parser)]
#[command(name = "hdl", version, about = "Guided data collection and few-shot fault diagnosis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Write Virtual and Field samples for every state and condition.
    GenData,
    /// Per-state similarity and single-state classifier metrics.
    EvalGrid,
    /// Search for a collection plan; writes the plan and a reward CSV.
    TrainDqn,
    /// Train the diagnosis model on the plan's states; records its fingerprint in the plan.
    TrainProtonet,
    /// Run the session service.
    Serve,
    /// Drive one scripted session to a diagnosis.
    Diagnose {
        /// Simulated ground truth; derived from the seed when absent.
        #[arg(long)]
        condition: Option<Condition>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::EvalGrid => "eval-grid",
            Command::TrainDqn => "train-dqn",
            Command::TrainProtonet => "train-protonet",
            Command::Serve => "serve",
            Command::Diagnose { .. } => "diagnose",
        }
    }
}

fn fail(command: Option<&str>, message: String) -> ExitCode {
    let message = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ");
    let _ = writeln!(std::io::stderr(), "{}", json!({"error": message, "command": command}));
    ExitCode::FAILURE
}

fn run(cli: &Cli) -> anyhow::Result<serde_json::Value> {
    let run = RunConfig::resolve(&cli.flags)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&run),
        Command::EvalGrid => commands::eval_grid(&run),
        Command::TrainDqn => commands::train_dqn_cmd(&run),
        Command::TrainProtonet => commands::train_protonet_cmd(&run),
        Command::Serve => commands::serve_cmd(&run),
        Command::Diagnose { condition } => commands::diagnose(&run, *condition),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail(None, first.to_string());
        }
    };
    match run(&cli) {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(Some(cli.command.name()), format!("{e:#}")),
    }
}
