//! Inference-time logit adjustment, OOD scorers and thresholding.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GrodError, Result};
use crate::numerics::{column_mean, log_sum_exp, sample_covariance, softmax, symmetric_eigen};
use crate::scalar::Scalar;
use crate::transformer::classify_max;

pub use crate::metrics::pick_threshold;

/// Map raw `(K+1)`-logit rows to `K`-vectors.
///
/// Rows whose argmax is the OOD output become uniform `1/K`; all others keep
/// their first `K` logits, softmax-normalized.
pub fn adjust_logits<T: Scalar>(raw: ArrayView2<T>) -> Array2<T> {
    let k = raw.ncols() - 1;
    let uniform = T::one() / T::from_usize(k).unwrap();
    let mut out = Array2::zeros((raw.nrows(), k));
    for (i, row) in raw.rows().into_iter().enumerate() {
        if classify_max(row) == k {
            out.row_mut(i).fill(uniform);
        } else {
            out.row_mut(i).assign(&softmax(row.slice(s![..k])));
        }
    }
    out
}

pub fn msp_score<T: Scalar>(adjusted: ArrayView1<T>) -> T {
    adjusted.iter().copied().fold(T::neg_infinity(), T::max)
}

/// `T·log Σ exp(v/T)`.
pub fn energy_score<T: Scalar>(logits: ArrayView1<T>, temperature: T) -> T {
    temperature * log_sum_exp(logits.mapv(|v| v / temperature).view())
}

/// Principal subspace of ID features plus the residual scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VimCalibration<T> {
    /// `s × d'`, orthonormal columns.
    pub principal_basis: Array2<T>,
    pub feature_mean: Array1<T>,
    pub alpha: T,
}

/// Default principal dimension: `s/2` for `s ≤ 8`, else `min(s−1, 64)`.
pub fn default_principal_dim(s: usize) -> usize {
    if s <= 8 {
        s / 2
    } else {
        (s - 1).min(64)
    }
}

impl<T: Scalar> VimCalibration<T> {
    /// Norm of the component of `x − mean` orthogonal to the basis.
    pub fn residual(&self, x: ArrayView1<T>) -> T {
        let c = &x - &self.feature_mean;
        let coords = self.principal_basis.t().dot(&c);
        let r = c - self.principal_basis.dot(&coords);
        r.dot(&r).sqrt()
    }
}

/// Fit the principal subspace on ID features and set
/// `α = Σ max-logit / Σ residual` over the calibration set.
pub fn vim_calibrate<T: Scalar>(
    features: ArrayView2<T>,
    logits: ArrayView2<T>,
    d_prime: usize,
) -> Result<VimCalibration<T>> {
    let (n, s) = features.dim();
    if logits.nrows() != n {
        return Err(GrodError::LengthMismatch { left: n, right: logits.nrows() });
    }
    if n < d_prime + 1 || n < 2 {
        return Err(GrodError::TooFewSamples { needed: (d_prime + 1).max(2), got: n });
    }
    if d_prime > s {
        return Err(GrodError::InvalidArgument(format!("principal dim {d_prime} exceeds {s}")));
    }
    let mean = column_mean(features)?;
    let cov = sample_covariance(features)?;
    let (_, vectors) = symmetric_eigen(cov.view())?;
    let mut calib = VimCalibration {
        principal_basis: vectors.slice(s![.., ..d_prime]).to_owned(),
        feature_mean: mean,
        alpha: T::one(),
    };
    let residual_sum: T = features.rows().into_iter().map(|x| calib.residual(x)).sum();
    let tiny = T::lit(1e-12) * T::from_usize(n).unwrap();
    if !(residual_sum > tiny) {
        return Err(GrodError::DegenerateFeatures);
    }
    let max_sum: T = logits.rows().into_iter().map(msp_score).sum();
    let alpha = max_sum / residual_sum;
    if !(alpha > T::zero()) || !alpha.is_finite() {
        return Err(GrodError::InvalidArgument(format!(
            "residual scale must be positive and finite, got {alpha}"
        )));
    }
    calib.alpha = alpha;
    Ok(calib)
}

/// `logsumexp(adjusted) − α·residual(x)`.
pub fn vim_score<T: Scalar>(x: ArrayView1<T>, adjusted: ArrayView1<T>, calib: &VimCalibration<T>) -> T {
    log_sum_exp(adjusted) - calib.alpha * calib.residual(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Msp,
    Energy,
    Vim,
}

impl std::str::FromStr for ScorerKind {
    type Err = GrodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(ScorerKind::Msp),
            "energy" => Ok(ScorerKind::Energy),
            "vim" => Ok(ScorerKind::Vim),
            other => Err(GrodError::InvalidArgument(format!("unknown scorer '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScorerKind::Msp => "msp",
            ScorerKind::Energy => "energy",
            ScorerKind::Vim => "vim",
        })
    }
}

/// A ready-to-use scoring function over adjusted logits.
#[derive(Debug, Clone, PartialEq)]
pub enum Scorer<T> {
    Msp,
    Energy { temperature: T },
    Vim(VimCalibration<T>),
}

impl<T: Scalar> Scorer<T> {
    /// Build the scorer; VIM is calibrated on the given ID features and
    /// their adjusted logits.
    pub fn build(
        kind: ScorerKind,
        calib_features: ArrayView2<T>,
        calib_adjusted: ArrayView2<T>,
    ) -> Result<Self> {
        Ok(match kind {
            ScorerKind::Msp => Scorer::Msp,
            ScorerKind::Energy => Scorer::Energy { temperature: T::one() },
            ScorerKind::Vim => {
                let d = default_principal_dim(calib_features.ncols());
                Scorer::Vim(vim_calibrate(calib_features, calib_adjusted, d)?)
            }
        })
    }

    pub fn score(&self, feature: ArrayView1<T>, adjusted: ArrayView1<T>) -> T {
        match self {
            Scorer::Msp => msp_score(adjusted),
            Scorer::Energy { temperature } => energy_score(adjusted, *temperature),
            Scorer::Vim(c) => vim_score(feature, adjusted, c),
        }
    }

    pub fn score_rows(&self, features: ArrayView2<T>, adjusted: ArrayView2<T>) -> Vec<T> {
        features
            .axis_iter(Axis(0))
            .zip(adjusted.axis_iter(Axis(0)))
            .map(|(f, a)| self.score(f, a))
            .collect()
    }
}

/// Per-sample scores and score-based predictions (0-based; `K` is OOD).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport<T> {
    pub scores: Vec<T>,
    pub adjusted_logits: Array2<T>,
    pub predictions: Vec<usize>,
    pub threshold: T,
}

impl<T: Scalar> ScoreReport<T> {
    pub fn new(scores: Vec<T>, adjusted_logits: Array2<T>, threshold: T) -> Self {
        let k = adjusted_logits.ncols();
        let predictions = scores
            .iter()
            .zip(adjusted_logits.rows())
            .map(|(&s, row)| if s < threshold { k } else { classify_max(row) })
            .collect();
        ScoreReport { scores, adjusted_logits, predictions, threshold }
    }
}
