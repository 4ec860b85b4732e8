//! In-memory experiment runs shared by the CLI commands and the tests.

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureBatch;
use crate::error::Result;
use crate::metrics::id_accuracy;
use crate::postprocess::{adjust_logits, msp_score};
use crate::synthdata::{gen_appendix_c, gen_feature_set};
use crate::transformer::{classify_max, TransformerModel};

use super::config::{ExperimentConfig, Task};
use super::eval::{argmax_rate, evaluate, score_inputs, EvalReport, ScoreDump};
use super::sub_seed;
use super::train::{mean_probabilities, train, EpochLog, Selection, TrainOutcome, TrainSettings};

/// ID train/test data plus named OOD evaluation sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub classes: usize,
    pub train: FeatureBatch<f64>,
    pub test: FeatureBatch<f64>,
    pub ood: Vec<(String, FeatureBatch<f64>)>,
}

/// The mixture for `seed`, sized by the config.
pub fn appendix_c_experiment(cfg: &ExperimentConfig, seed: u64) -> Experiment {
    let d = gen_appendix_c::<f64>(seed, cfg.train_per_component, cfg.test_per_component);
    Experiment { classes: d.classes.len(), train: d.train, test: d.test, ood: vec![("ood".into(), d.ood_set)] }
}

/// `K + 1` separated clusters; the last one is held out as OOD and only
/// appears in the evaluation data.
pub fn synthetic_ingest_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<Experiment> {
    let g = &cfg.gen;
    let k = g.classes;
    let split = |n: usize, tag: u64| gen_feature_set::<f64>(k + 1, g.dim, n, g.separation, sub_seed(seed, tag));
    let train_all = split(g.train_per_class, 20)?;
    let test_all = split(g.test_per_class, 21)?;
    let pick = |b: &FeatureBatch<f64>, ood: bool| {
        let rows: Vec<usize> = (0..b.len()).filter(|&r| (b.labels[r] == k) == ood).collect();
        b.select(&rows)
    };
    Ok(Experiment {
        classes: k,
        train: pick(&train_all, false),
        test: pick(&test_all, false),
        ood: vec![("ood".into(), pick(&test_all, true))],
    })
}

/// Freshly initialized model for the configured task.
pub fn initial_model(
    cfg: &ExperimentConfig,
    classes: usize,
    input_dim: usize,
    depth: usize,
    seed: u64,
) -> Result<TransformerModel<f64>> {
    let init_seed = sub_seed(seed, 10);
    match cfg.task {
        Task::Ingest => TransformerModel::identity_backbone(input_dim, classes + 1, init_seed),
        Task::AppendixC | Task::CapacitySweep => TransformerModel::init(cfg.model.shape(depth, classes), init_seed),
    }
}

pub struct Fitted {
    /// Epochs of the cross-entropy stage; empty when it is disabled.
    pub pretrain_log: Vec<EpochLog>,
    pub outcome: TrainOutcome<f64>,
}

/// Optional cross-entropy pretraining, then the configured training stage.
pub fn fit(
    cfg: &ExperimentConfig,
    model: TransformerModel<f64>,
    data: &FeatureBatch<f64>,
    seed: u64,
) -> Result<Fitted> {
    let mut pretrain_log = Vec::new();
    let model = if cfg.pretrain.epochs > 0 {
        let pre = TrainSettings {
            epochs: cfg.pretrain.epochs,
            lr: cfg.pretrain.lr,
            use_grod: false,
            selection: Selection::Last,
            ..cfg.train.clone()
        };
        let out = train(model, data, &pre, sub_seed(seed, 3))?;
        pretrain_log = out.log;
        out.model
    } else {
        model
    };
    Ok(Fitted { pretrain_log, outcome: train(model, data, &cfg.train, seed)? })
}

pub struct RunResult {
    pub fitted: Fitted,
    pub report: EvalReport,
    pub scores: ScoreDump<f64>,
}

/// Train on `exp.train` and evaluate against every OOD set.
pub fn run_experiment(cfg: &ExperimentConfig, exp: &Experiment, seed: u64) -> Result<RunResult> {
    let model = initial_model(cfg, exp.classes, exp.train.dim(), cfg.model.depth, seed)?;
    let fitted = fit(cfg, model, &exp.train, seed)?;
    let (report, scores) =
        evaluate(&fitted.outcome.model, &exp.train, &exp.test, &exp.ood, cfg.scorer, &cfg.config_hash(), seed)?;
    Ok(RunResult { fitted, report, scores })
}

/// Equal-width histogram over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn unit_histogram(values: &[f64], bins: usize) -> Histogram {
    let mut counts = vec![0; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram { edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(), counts }
}

pub const SWEEP_HISTOGRAM_BINS: usize = 10;

/// One trained model of the capacity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub depth: usize,
    pub seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Fraction of OOD rows assigned to the OOD output.
    pub ood_acc: f64,
    /// Mean softmax vector over the test rows of each true class, OOD last.
    pub mean_probabilities: Vec<Vec<f64>>,
    /// MSP histogram of the test rows of each true class, OOD last.
    pub msp_histograms: Vec<Histogram>,
}

/// Cross-entropy-only training at one depth, whatever the config says
/// about GROD.
pub fn sweep_row(cfg: &ExperimentConfig, depth: usize, seed: u64) -> Result<SweepRow> {
    let exp = appendix_c_experiment(cfg, seed);
    let mut ce = cfg.clone();
    ce.train.use_grod = false;
    ce.train.grod.gamma = 0.0;
    ce.task = Task::CapacitySweep;
    let model = initial_model(&ce, exp.classes, exp.train.dim(), depth, seed)?;
    let model = fit(&ce, model, &exp.train, seed)?.outcome.model;
    let k = exp.classes;

    let accuracy = |b: &FeatureBatch<f64>| -> Result<f64> {
        let s = score_inputs(&model, b)?;
        let pred: Vec<usize> = s.raw.rows().into_iter().map(classify_max).collect();
        id_accuracy(&pred, &b.labels, None)
    };
    let train_acc = accuracy(&exp.train)?;
    let test_acc = accuracy(&exp.test)?;
    let ood = score_inputs(&model, &exp.ood[0].1)?;

    let mut groups: Vec<FeatureBatch<f64>> = (0..k)
        .map(|c| {
            let rows: Vec<usize> = (0..exp.test.len()).filter(|&r| exp.test.labels[r] == c).collect();
            exp.test.select(&rows)
        })
        .collect();
    groups.push(exp.ood[0].1.clone());
    let mut mean_probs = Vec::with_capacity(k + 1);
    let mut hists = Vec::with_capacity(k + 1);
    for g in &groups {
        let s = score_inputs(&model, g)?;
        mean_probs.push(mean_probabilities(&s.raw).to_vec());
        let msp: Vec<f64> = adjust_logits(s.raw.view()).rows().into_iter().map(msp_score).collect();
        hists.push(unit_histogram(&msp, SWEEP_HISTOGRAM_BINS));
    }
    Ok(SweepRow {
        depth,
        seed,
        train_acc,
        test_acc,
        ood_acc: argmax_rate(&ood.raw, k),
        mean_probabilities: mean_probs,
        msp_histograms: hists,
    })
}

/// Seed-averaged accuracies of one depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub depth: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ood_acc: f64,
}

pub fn summarize_sweep(rows: &[SweepRow], depths: &[usize]) -> Vec<SweepSummary> {
    depths
        .iter()
        .map(|&depth| {
            let at: Vec<&SweepRow> = rows.iter().filter(|r| r.depth == depth).collect();
            let n = at.len().max(1) as f64;
            let mean = |f: fn(&SweepRow) -> f64| at.iter().map(|r| f(r)).sum::<f64>() / n;
            SweepSummary {
                depth,
                train_acc: mean(|r| r.train_acc),
                test_acc: mean(|r| r.test_acc),
                ood_acc: mean(|r| r.ood_acc),
            }
        })
        .collect()
}
