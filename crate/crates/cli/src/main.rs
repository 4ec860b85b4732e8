//! `grod`: generate data, train, evaluate, sweep model capacity and ingest
//! external features.
//!
//! On success a one-line JSON summary goes to stdout. On failure a single
//! JSON line `{"error":{"code":..,"message":..,"line":..}}` goes to stderr
//! and the exit status encodes the error class:
//!
//! | status | meaning                                |
//! |--------|----------------------------------------|
//! | 1      | other failures                         |
//! | 2      | command-line usage                     |
//! | 3      | file system                            |
//! | 4      | malformed config, data or checkpoint   |
//! | 5      | numerical failure                      |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grod::harness::commands::{cmd_eval, cmd_gen_data, cmd_ingest, cmd_sweep_capacity, cmd_train};
use grod::harness::config::ExperimentConfig;
use grod::GrodError;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "grod", version, about = "Outlier synthesis for OOD detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for inputs written by gen-data and for all outputs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.csv, test.csv and ood.csv.
    GenData(Common),
    /// Train and write model.ckpt, grod_state.json and train_log.json.
    Train(Common),
    /// Score a checkpoint and write report.json and scores.json.
    Eval(Common),
    /// Cross-entropy training across depths and seeds; writes sweep.json.
    SweepCapacity(Common),
    /// Head-only training and evaluation on feature files.
    Ingest(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, GrodError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<Value, GrodError> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let written = cmd_gen_data(&cfg, &c.out)?;
            let files: Vec<String> = written.0.iter().map(|p| display(p)).collect();
            Ok(json!({ "command": "gen-data", "seed": cfg.seed, "files": files }))
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let log = cmd_train(&cfg, &c.out)?;
            let last = log.epochs.last().map(|e| e.loss);
            Ok(json!({
                "command": "train",
                "seed": cfg.seed,
                "best_epoch": log.best_epoch,
                "final_loss": last,
                "out": display(&c.out),
            }))
        }
        Command::Eval(c) => {
            let cfg = load(&c)?;
            let r = cmd_eval(&cfg, &c.out)?;
            Ok(json!({ "command": "eval", "seed": cfg.seed, "metrics": r.metrics, "out": display(&c.out) }))
        }
        Command::SweepCapacity(c) => {
            let cfg = load(&c)?;
            let r = cmd_sweep_capacity(&cfg, &c.out)?;
            Ok(json!({ "command": "sweep-capacity", "rows": r.rows.len(), "summary": r.summary, "out": display(&c.out) }))
        }
        Command::Ingest(c) => {
            let cfg = load(&c)?;
            let r = cmd_ingest(&cfg, &c.out)?;
            Ok(json!({ "command": "ingest", "seed": cfg.seed, "metrics": r.metrics, "out": display(&c.out) }))
        }
    }
}

fn fail(code: &str, message: String, line: Option<usize>, status: u8) -> ExitCode {
    // Display impls never contain newlines, but error sources might
    let message = message.replace('\n', " ");
    eprintln!("{}", json!({ "error": { "code": code, "message": message, "line": line } }));
    ExitCode::from(status)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail("usage", first.to_string(), None, 2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.code(), e.to_string(), e.line(), e.exit_code() as u8),
    }
}
