//! The CLI subcommands, each reading its inputs from and writing its
//! artifacts to disk.
//!
//! | command          | reads                                   | writes                                        |
//! |------------------|-----------------------------------------|-----------------------------------------------|
//! | `gen-data`       |                                         | `train.csv`, `test.csv`, `ood.csv`            |
//! | `train`          | train file                              | `model.ckpt`, `grod_state.json`, `train_log.json` |
//! | `eval`           | checkpoint, train/test/OOD files        | `report.json`, `scores.json`                  |
//! | `sweep-capacity` |                                         | `sweep.json`                                  |
//! | `ingest`         | train/test/OOD files                    | `model.ckpt`, `report.json`, `scores.json`    |
//!
//! Inputs default to the files `gen-data` writes into the output
//! directory; the config can point elsewhere.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureBatch;
use crate::error::{file_error, GrodError, Result};
use crate::transformer::{read_checkpoint, write_checkpoint, TransformerModel};

use super::config::{ExperimentConfig, Task};
use super::eval::{evaluate, EvalReport, REPORT_SCHEMA_VERSION};
use super::io::{read_feature_file, write_feature_file, FeatureFile, LabelRange};
use super::pipeline::{
    appendix_c_experiment, fit, initial_model, summarize_sweep, sweep_row, synthetic_ingest_experiment, Experiment,
    SweepRow, SweepSummary,
};
use super::train::EpochLog;

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const OOD_FILE: &str = "ood.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "grod_state.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.json";
pub const SWEEP_FILE: &str = "sweep.json";

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(file_error(path))
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(file_error(out))
}

fn save_model(path: &Path, model: &TransformerModel<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(file_error(path))?);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(file_error(path))
}

pub fn load_model(path: &Path) -> Result<TransformerModel<f64>> {
    read_checkpoint(BufReader::new(File::open(path).map_err(file_error(path))?))
}

/// Paths of the files written by a command.
#[derive(Debug, Clone, PartialEq)]
pub struct Written(pub Vec<PathBuf>);

/// Write the task's train, test and OOD feature files.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Written> {
    ensure_dir(out)?;
    let exp = match cfg.task {
        Task::AppendixC | Task::CapacitySweep => appendix_c_experiment(cfg, cfg.seed),
        Task::Ingest => synthetic_ingest_experiment(cfg, cfg.seed)?,
    };
    let files = [
        (out.join(TRAIN_FILE), &exp.train),
        (out.join(TEST_FILE), &exp.test),
        (out.join(OOD_FILE), &exp.ood[0].1),
    ];
    for (path, batch) in &files {
        write_feature_file(path, batch, exp.classes)?;
    }
    Ok(Written(files.into_iter().map(|(p, _)| p).collect()))
}

fn read_split(cfg: &ExperimentConfig, out: &Path) -> Result<(FeatureFile<f64>, FeatureFile<f64>)> {
    let train = read_feature_file(&cfg.resolve(cfg.paths.train_file.as_deref(), out, TRAIN_FILE), LabelRange::IdOnly)?;
    let test_path = cfg.resolve(cfg.paths.test_file.as_deref(), out, TEST_FILE);
    let test = read_feature_file(&test_path, LabelRange::IdOnly)?;
    if (test.dim, test.classes) != (train.dim, train.classes) {
        return Err(GrodError::Format {
            line: 1,
            msg: format!(
                "{}: header dim={},classes={} does not match the training file's dim={},classes={}",
                test_path.display(),
                test.dim,
                test.classes,
                train.dim,
                train.classes
            ),
        });
    }
    Ok((train, test))
}

fn read_ood(cfg: &ExperimentConfig, out: &Path, dim: usize) -> Result<Vec<(String, FeatureBatch<f64>)>> {
    cfg.ood_paths(out)
        .into_iter()
        .map(|(name, path)| {
            let f: FeatureFile<f64> = read_feature_file(&path, LabelRange::WithOod)?;
            if f.dim != dim {
                return Err(GrodError::Format {
                    line: 1,
                    msg: format!("{}: dim={} but the training file has dim={dim}", path.display(), f.dim),
                });
            }
            Ok((name, f.batch))
        })
        .collect()
}

fn read_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Experiment> {
    let (train, test) = read_split(cfg, out)?;
    let ood = read_ood(cfg, out, train.dim)?;
    Ok(Experiment { classes: train.classes, train: train.batch, test: test.batch, ood })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub pretrain: Vec<EpochLog>,
    pub epochs: Vec<EpochLog>,
}

fn train_and_save(
    cfg: &ExperimentConfig,
    classes: usize,
    data: &FeatureBatch<f64>,
    out: &Path,
) -> Result<(TransformerModel<f64>, TrainLog)> {
    let model = initial_model(cfg, classes, data.dim(), cfg.model.depth, cfg.seed)?;
    if model.shape.input_dim() != data.dim() {
        return Err(GrodError::DimensionMismatch { expected: model.shape.input_dim(), got: data.dim() });
    }
    let fitted = fit(cfg, model, data, cfg.seed)?;
    let outcome = fitted.outcome;
    save_model(&out.join(CHECKPOINT_FILE), &outcome.model)?;
    if let Some(state) = &outcome.state {
        let path = out.join(STATE_FILE);
        std::fs::write(&path, state.to_json()?).map_err(file_error(&path))?;
    }
    let log = TrainLog {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        best_epoch: outcome.best_epoch,
        pretrain: fitted.pretrain_log,
        epochs: outcome.log,
    };
    write_json(&out.join(TRAIN_LOG_FILE), &log)?;
    Ok((outcome.model, log))
}

/// Train on the training file and save the selected model.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainLog> {
    ensure_dir(out)?;
    let path = cfg.resolve(cfg.paths.train_file.as_deref(), out, TRAIN_FILE);
    let train = read_feature_file(&path, LabelRange::IdOnly)?;
    Ok(train_and_save(cfg, train.classes, &train.batch, out)?.1)
}

fn evaluate_and_save(
    cfg: &ExperimentConfig,
    model: &TransformerModel<f64>,
    exp: &Experiment,
    out: &Path,
) -> Result<EvalReport> {
    let k = model.shape.outputs - 1;
    if k != exp.classes {
        return Err(GrodError::DimensionMismatch { expected: k, got: exp.classes });
    }
    let (report, scores) = evaluate(model, &exp.train, &exp.test, &exp.ood, cfg.scorer, &cfg.config_hash(), cfg.seed)?;
    let path = out.join(REPORT_FILE);
    std::fs::write(&path, report.to_json()?).map_err(file_error(&path))?;
    write_json(&out.join(SCORES_FILE), &scores)?;
    Ok(report)
}

/// Score the test and OOD files with a saved model.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    ensure_dir(out)?;
    let model = load_model(&cfg.resolve(cfg.paths.checkpoint.as_deref(), out, CHECKPOINT_FILE))?;
    let exp = read_experiment(cfg, out)?;
    evaluate_and_save(cfg, &model, &exp, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

/// Cross-entropy training of every configured depth at every seed, each
/// on the mixture generated from that seed.
pub fn cmd_sweep_capacity(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    ensure_dir(out)?;
    let mut rows = Vec::with_capacity(cfg.model.depths.len() * cfg.seeds.len());
    for &depth in &cfg.model.depths {
        for &seed in &cfg.seeds {
            rows.push(sweep_row(cfg, depth, seed)?);
        }
    }
    let summary = summarize_sweep(&rows, &cfg.model.depths);
    let report = SweepReport { schema_version: REPORT_SCHEMA_VERSION, config_hash: cfg.config_hash(), rows, summary };
    write_json(&out.join(SWEEP_FILE), &report)?;
    Ok(report)
}

/// Head-only training and evaluation on externally supplied features.
pub fn cmd_ingest(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    ensure_dir(out)?;
    let exp = read_experiment(cfg, out)?;
    let mut cfg = ExperimentConfig { task: Task::Ingest, ..cfg.clone() };
    cfg.train.head_only = true;
    let (model, _) = train_and_save(&cfg, exp.classes, &exp.train, out)?;
    evaluate_and_save(&cfg, &model, &exp, out)
}
