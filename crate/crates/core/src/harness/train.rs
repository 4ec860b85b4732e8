//! Mini-batch training with optional fake-OOD augmentation.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureBatch;
use crate::error::{GrodError, Result};
use crate::grod::{grod_augment_batch, GrodConfig, GrodState};
use crate::loss::batch_loss;
use crate::metrics::{auroc, id_accuracy};
use crate::postprocess::{adjust_logits, msp_score};
use crate::scalar::Scalar;
use crate::transformer::{classify_max, AdamW, ForwardCache, Optimizer, Sgd, TransformerModel};

use super::sub_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

/// Which epoch's parameters [`train`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Best held-out AUROC of ID against fake OOD.
    ValAuroc,
    /// Best held-out ID accuracy.
    ValAcc,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// `false` trains with plain cross-entropy and no fake OOD.
    pub use_grod: bool,
    pub grod: GrodConfig,
    /// Freeze everything but the classifier head.
    pub head_only: bool,
    pub val_fraction: f64,
    pub selection: Selection,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 10,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 5e-2,
            optimizer: OptimizerKind::Adamw,
            use_grod: true,
            grod: GrodConfig::default(),
            head_only: false,
            val_fraction: 0.1,
            selection: Selection::ValAuroc,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(GrodError::InvalidArgument("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(GrodError::InvalidArgument("batch_size must be ≥ 2".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(GrodError::InvalidArgument("lr must be > 0 and weight_decay ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(GrodError::InvalidArgument("val_fraction must lie in [0, 1)".into()));
        }
        self.grod.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    /// Fake OOD rows that survived filtering, summed over the epoch.
    pub fake_retained: usize,
    pub val_acc: f64,
    /// ID against held-out fake OOD.
    pub val_auroc: Option<f64>,
}

pub struct TrainOutcome<T> {
    pub model: TransformerModel<T>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub state: Option<GrodState<T>>,
}

/// Reshape a flat row into the model's `d̂₀ × τ` input.
pub fn model_input<T: Scalar>(model: &TransformerModel<T>, row: ArrayView1<T>) -> Result<Array2<T>> {
    let (d0, tau) = (model.shape.d_hat0, model.shape.tau);
    if row.len() != d0 * tau {
        return Err(GrodError::DimensionMismatch { expected: d0 * tau, got: row.len() });
    }
    Ok(row.to_owned().into_shape_with_order((d0, tau)).expect("length checked"))
}

/// Hidden features (flattened) and raw logits for every row.
pub fn features_and_logits<T: Scalar>(
    model: &TransformerModel<T>,
    inputs: &Array2<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    let n = inputs.nrows();
    let mut feats = Array2::zeros((n, model.shape.feature_dim()));
    let mut logits = Array2::zeros((n, model.shape.outputs));
    for (i, row) in inputs.rows().into_iter().enumerate() {
        let fwd = model.forward(model_input(model, row)?.view())?;
        feats.row_mut(i).assign(&TransformerModel::flatten_hidden(&fwd.hidden));
        logits.row_mut(i).assign(&fwd.logits);
    }
    Ok((feats, logits))
}

fn make_optimizer<T: Scalar>(s: &TrainSettings) -> Box<dyn Optimizer<T>> {
    match s.optimizer {
        OptimizerKind::Adamw => Box::new(AdamW::new(T::lit(s.lr), T::lit(s.weight_decay))),
        OptimizerKind::Sgd => Box::new(Sgd { lr: T::lit(s.lr), weight_decay: T::lit(s.weight_decay) }),
    }
}

struct StepStats {
    loss: f64,
    l1: f64,
    l2: f64,
    fake: usize,
}

fn train_step<T: Scalar>(
    model: &mut TransformerModel<T>,
    opt: &mut dyn Optimizer<T>,
    batch: &FeatureBatch<T>,
    state: Option<&mut GrodState<T>>,
    settings: &TrainSettings,
    seed: u64,
) -> Result<StepStats> {
    let n = batch.len();
    let k = model.shape.outputs - 1;
    let mut caches: Vec<ForwardCache<T>> = Vec::with_capacity(n);
    let mut feats = Array2::zeros((n, model.shape.feature_dim()));
    let mut logits_id = Array2::zeros((n, k + 1));
    for (i, row) in batch.features.rows().into_iter().enumerate() {
        let (fwd, cache) = model.forward_cached(model_input(model, row)?.view())?;
        feats.row_mut(i).assign(&TransformerModel::flatten_hidden(&fwd.hidden));
        logits_id.row_mut(i).assign(&fwd.logits);
        caches.push(cache);
    }

    let (labels, fake_points, gamma) = match state {
        Some(state) => {
            let aug = grod_augment_batch(feats.view(), &batch.labels, state, &settings.grod, seed)?;
            let gamma = if aug.warmup { 0.0 } else { settings.grod.gamma };
            let fake = aug.features.slice(ndarray::s![aug.n_id.., ..]).to_owned();
            (aug.labels, fake, gamma)
        }
        None => {
            let mut y = Array2::zeros((n, k + 1));
            for (i, &c) in batch.labels.iter().enumerate() {
                y[[i, c]] = T::one();
            }
            (y, Array2::zeros((0, feats.ncols())), 0.0)
        }
    };

    let m = fake_points.nrows();
    let mut logits = Array2::zeros((n + m, k + 1));
    logits.slice_mut(ndarray::s![..n, ..]).assign(&logits_id);
    let mut fake_hidden = Vec::with_capacity(m);
    for (j, p) in fake_points.rows().into_iter().enumerate() {
        let h = model.unflatten_hidden(p)?;
        let (z, inner) = model.head_forward(h.view());
        logits.row_mut(n + j).assign(&z);
        fake_hidden.push((h, inner));
    }

    let (bl, dlogits) = batch_loss(labels.view(), logits.view(), T::lit(gamma))?;
    let mut grads = model.zeros_like();
    for (i, cache) in caches.iter().enumerate() {
        if settings.head_only {
            model.head_backward(cache.hidden().view(), cache.head_inner().view(), dlogits.row(i), &mut grads);
        } else {
            model.backward_into(cache, dlogits.row(i), &mut grads);
        }
    }
    // fake points are constants: only the head sees their gradient
    for (j, (h, inner)) in fake_hidden.iter().enumerate() {
        model.head_backward(h.view(), inner.view(), dlogits.row(n + j), &mut grads);
    }
    if settings.head_only {
        opt.step_head(model, &grads);
    } else {
        opt.step(model, &grads);
    }
    if !model.is_finite() {
        return Err(GrodError::InvalidArgument("parameters diverged to non-finite values".into()));
    }
    Ok(StepStats { loss: bl.total.as_f64(), l1: bl.l1.as_f64(), l2: bl.l2.as_f64(), fake: m })
}

/// Held-out statistics: ID accuracy, and AUROC of MSP on the ID rows
/// against fake OOD synthesized from the held-out features themselves
/// (`None` when no fake OOD survives).
pub fn validation_stats<T: Scalar>(
    model: &TransformerModel<T>,
    val: &FeatureBatch<T>,
    grod: &GrodConfig,
    seed: u64,
) -> Result<(f64, Option<f64>)> {
    let (feats, logits) = features_and_logits(model, &val.features)?;
    let k = model.shape.outputs - 1;
    let pred: Vec<usize> = logits.rows().into_iter().map(classify_max).collect();
    let acc = id_accuracy(&pred, &val.labels, None)?;
    let config = GrodConfig { warmup_batches: 0, ..grod.clone() };
    let mut state = GrodState::new(k, feats.ncols(), &config);
    let fake = grod_augment_batch(feats.view(), &val.labels, &mut state, &config, seed)
        .ok()
        .map(|aug| aug.features.slice(ndarray::s![aug.n_id.., ..]).to_owned())
        .filter(|f| f.nrows() > 0);
    let Some(fake) = fake else {
        return Ok((acc, None));
    };
    let id: Vec<T> = adjust_logits(logits.view()).rows().into_iter().map(msp_score).collect();
    let mut fake_logits = Array2::zeros((fake.nrows(), k + 1));
    for (i, p) in fake.rows().into_iter().enumerate() {
        fake_logits.row_mut(i).assign(&model.head_logits(p)?);
    }
    let ood: Vec<T> = adjust_logits(fake_logits.view()).rows().into_iter().map(msp_score).collect();
    Ok((acc, Some(auroc(&id, &ood)?)))
}

/// Train from `model`, keeping the parameters of the epoch with the best
/// validation criterion (earliest on ties).
pub fn train<T: Scalar>(
    mut model: TransformerModel<T>,
    data: &FeatureBatch<T>,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    settings.validate()?;
    let k = model.shape.outputs - 1;
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= k) {
        return Err(GrodError::InvalidArgument(format!("training label {} outside 1..={k}", bad + 1)));
    }
    let (train_set, val_set) = if settings.val_fraction > 0.0 {
        data.split(settings.val_fraction, sub_seed(seed, 1))
    } else {
        (data.clone(), FeatureBatch { features: Array2::zeros((0, data.dim())), labels: vec![] })
    };
    if train_set.len() < 2 {
        return Err(GrodError::TooFewSamples { needed: 2, got: train_set.len() });
    }
    let mut opt = make_optimizer::<T>(settings);
    let mut state = settings
        .use_grod
        .then(|| GrodState::new(k, model.shape.feature_dim(), &settings.grod));
    let mut log = Vec::with_capacity(settings.epochs);
    let mut best: Option<(f64, usize, TransformerModel<T>)> = None;
    let mut global_batch = 0usize;

    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 100 + epoch as u64)));
        let (mut loss, mut l1, mut l2, mut fake, mut batches) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(settings.batch_size) {
            // a trailing singleton has no covariance; fold it into nothing
            if chunk.len() < 2 {
                continue;
            }
            let batch = train_set.select(chunk);
            let step = train_step(
                &mut model,
                opt.as_mut(),
                &batch,
                state.as_mut(),
                settings,
                sub_seed(seed, 1_000_000 + global_batch as u64),
            )
            .map_err(|e| GrodError::AtBatch { batch: global_batch, source: Box::new(e) })?;
            global_batch += 1;
            loss += step.loss;
            l1 += step.l1;
            l2 += step.l2;
            fake += step.fake;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let (val_acc, val_auroc) = if val_set.len() >= 2 {
            validation_stats(&model, &val_set, &settings.grod, sub_seed(seed, 2))?
        } else {
            (f64::NAN, None)
        };
        let criterion = match settings.selection {
            Selection::ValAuroc => val_auroc.unwrap_or(val_acc),
            Selection::ValAcc => val_acc,
            Selection::Last => epoch as f64,
        };
        log.push(EpochLog {
            epoch,
            loss: loss / nb,
            l1: l1 / nb,
            l2: l2 / nb,
            fake_retained: fake,
            val_acc,
            val_auroc,
        });
        // NaN never wins, so an empty validation split keeps the first epoch
        if best.as_ref().is_none_or(|(b, _, _)| criterion > *b) {
            best = Some((criterion, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, best_epoch, log, state })
}

/// Mean softmax output over the rows of `logits`.
pub fn mean_probabilities<T: Scalar>(logits: &Array2<T>) -> Array1<f64> {
    let mut acc = Array1::zeros(logits.ncols());
    for row in logits.rows() {
        acc += &crate::numerics::softmax(row).mapv(|v| v.as_f64());
    }
    acc / logits.nrows().max(1) as f64
}
