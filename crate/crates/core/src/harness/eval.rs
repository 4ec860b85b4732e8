//! Inference, scoring and the metric report.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureBatch;
use crate::error::{GrodError, Result};
use crate::metrics::{id_accuracy, summarize, MetricSummary};
use crate::postprocess::{adjust_logits, pick_threshold, ScoreReport, Scorer, ScorerKind};
use crate::scalar::Scalar;
use crate::transformer::{classify_max, TransformerModel};

use super::train::features_and_logits;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Target ID true-positive rate of the score threshold.
pub const THRESHOLD_TPR: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub rows: usize,
    pub metrics: MetricSummary,
    /// Fraction of rows whose largest logit is the OOD output.
    pub ood_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub scorer: ScorerKind,
    pub threshold: f64,
    pub id_rows: usize,
    /// All OOD sets pooled.
    pub metrics: MetricSummary,
    pub per_set: BTreeMap<String, SetReport>,
}

impl EvalReport {
    /// Pretty JSON with a trailing newline; byte-stable for equal reports.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Per-row scores of every evaluated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDump<T> {
    pub id: ScoreReport<T>,
    pub ood: BTreeMap<String, ScoreReport<T>>,
}

pub struct Scored<T> {
    pub features: Array2<T>,
    pub raw: Array2<T>,
    pub adjusted: Array2<T>,
}

pub fn score_inputs<T: Scalar>(model: &TransformerModel<T>, batch: &FeatureBatch<T>) -> Result<Scored<T>> {
    let (features, raw) = features_and_logits(model, &batch.features)?;
    let adjusted = adjust_logits(raw.view());
    Ok(Scored { features, raw, adjusted })
}

/// Fraction of rows whose argmax over all outputs equals `class`.
pub fn argmax_rate<T: Scalar>(raw: &Array2<T>, class: usize) -> f64 {
    let hits = raw.rows().into_iter().filter(|r| classify_max(*r) == class).count();
    hits as f64 / raw.nrows().max(1) as f64
}

/// Score the ID test set and each OOD set; the threshold is picked on the
/// ID test scores. `calib` (the ID training data) calibrates VIM.
pub fn evaluate<T: Scalar>(
    model: &TransformerModel<T>,
    calib: &FeatureBatch<T>,
    id_test: &FeatureBatch<T>,
    ood_sets: &[(String, FeatureBatch<T>)],
    scorer_kind: ScorerKind,
    config_hash: &str,
    seed: u64,
) -> Result<(EvalReport, ScoreDump<T>)> {
    if ood_sets.is_empty() {
        return Err(GrodError::EmptyClass("OOD"));
    }
    let k = model.shape.outputs - 1;
    let scorer = match scorer_kind {
        ScorerKind::Vim => {
            let c = score_inputs(model, calib)?;
            Scorer::build(scorer_kind, c.features.view(), c.adjusted.view())?
        }
        other => Scorer::build(other, Array2::<T>::zeros((0, 0)).view(), Array2::<T>::zeros((0, 0)).view())?,
    };
    let id = score_inputs(model, id_test)?;
    let id_scores = scorer.score_rows(id.features.view(), id.adjusted.view());
    let threshold = pick_threshold(&id_scores, THRESHOLD_TPR)?;
    let pred: Vec<usize> = id.raw.rows().into_iter().map(classify_max).collect();
    let id_acc = id_accuracy(&pred, &id_test.labels, None)?;

    let mut per_set = BTreeMap::new();
    let mut dump = BTreeMap::new();
    let mut pooled = Vec::new();
    for (name, set) in ood_sets {
        let s = score_inputs(model, set)?;
        let scores = scorer.score_rows(s.features.view(), s.adjusted.view());
        per_set.insert(
            name.clone(),
            SetReport {
                rows: set.len(),
                metrics: summarize(&id_scores, &scores, id_acc)?,
                ood_acc: argmax_rate(&s.raw, k),
            },
        );
        pooled.extend_from_slice(&scores);
        dump.insert(name.clone(), ScoreReport::new(scores, s.adjusted, threshold));
    }
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        scorer: scorer_kind,
        threshold: threshold.as_f64(),
        id_rows: id_test.len(),
        metrics: summarize(&id_scores, &pooled, id_acc)?,
        per_set,
    };
    let dump = ScoreDump { id: ScoreReport::new(id_scores, id.adjusted, threshold), ood: dump };
    Ok((report, dump))
}
