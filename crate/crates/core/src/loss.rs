//! Composite ID/OOD loss `L = (1−γ)·L₁ + γ·L₂`.
//!
//! `L₁` is the (K+1)-way cross-entropy. `L₂` is a binary cross-entropy after
//! both the label and the prediction are collapsed by
//! `φ̂(y) = [Σᵢ₌₁ᴷ yᵢ, y_{K+1}]`. Labels are probability vectors over
//! `K + 1` entries; the last entry is the OOD class.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{GrodError, Result};
use crate::numerics::{log_sum_exp, softmax};
use crate::scalar::Scalar;

/// Floor applied inside the `L₂` logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// `φ̂`: collapse a (K+1)-distribution into `(ID mass, OOD mass)`.
pub fn collapse<T: Scalar>(v: ArrayView1<T>) -> (T, T) {
    let k = v.len() - 1;
    let id: T = v.iter().take(k).copied().sum();
    (id, v[k])
}

/// One-hot label over `outputs` entries.
pub fn one_hot<T: Scalar>(class: usize, outputs: usize) -> Array1<T> {
    let mut y = Array1::zeros(outputs);
    y[class] = T::one();
    y
}

pub fn loss_l1<T: Scalar>(y: ArrayView1<T>, logits: ArrayView1<T>) -> T {
    let lse = log_sum_exp(logits);
    -y.iter()
        .zip(logits.iter())
        .map(|(&yj, &z)| if yj == T::zero() { T::zero() } else { yj * (z - lse) })
        .sum::<T>()
}

pub fn loss_l2<T: Scalar>(y: ArrayView1<T>, logits: ArrayView1<T>) -> T {
    let p = softmax(logits);
    let (y_id, y_ood) = collapse(y);
    let (p_id, p_ood) = collapse(p.view());
    let floor = T::lit(LOG_CLAMP);
    let term = |w: T, q: T| if w == T::zero() { T::zero() } else { w * q.max(floor).ln() };
    -(term(y_id, p_id) + term(y_ood, p_ood))
}

pub fn loss_total<T: Scalar>(y: ArrayView1<T>, logits: ArrayView1<T>, gamma: T) -> T {
    let mut total = T::zero();
    if gamma != T::one() {
        total += (T::one() - gamma) * loss_l1(y, logits);
    }
    if gamma != T::zero() {
        total += gamma * loss_l2(y, logits);
    }
    total
}

/// `∂L/∂logits` of [`loss_total`].
pub fn loss_grad_logits<T: Scalar>(y: ArrayView1<T>, logits: ArrayView1<T>, gamma: T) -> Array1<T> {
    let p = softmax(logits);
    let k = logits.len() - 1;
    let y_sum: T = y.iter().copied().sum();
    let mut grad = (&p * y_sum - y) * (T::one() - gamma);
    if gamma != T::zero() {
        let (y_id, y_ood) = collapse(y);
        let (p_id, p_ood) = collapse(p.view());
        let floor = T::lit(LOG_CLAMP);
        // coefficient of ∂P/∂z; zero where the clamp is active
        let c_id = if y_id != T::zero() && p_id > floor { y_id / p_id } else { T::zero() };
        let c_ood = if y_ood != T::zero() && p_ood > floor { y_ood / p_ood } else { T::zero() };
        for j in 0..=k {
            let in_id = if j < k { T::one() } else { T::zero() };
            let in_ood = T::one() - in_id;
            let d = -(c_id * p[j] * (in_id - p_id) + c_ood * p[j] * (in_ood - p_ood));
            grad[j] += gamma * d;
        }
    }
    grad
}

/// Loss components averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss<T> {
    pub total: T,
    pub l1: T,
    pub l2: T,
}

/// Batch mean of the loss and its per-row logit gradients (already divided
/// by the batch size).
pub fn batch_loss<T: Scalar>(
    labels: ArrayView2<T>,
    logits: ArrayView2<T>,
    gamma: T,
) -> Result<(BatchLoss<T>, Array2<T>)> {
    if labels.dim() != logits.dim() {
        return Err(GrodError::ShapeMismatch(format!(
            "labels {:?} vs logits {:?}",
            labels.dim(),
            logits.dim()
        )));
    }
    let n = labels.nrows();
    if n == 0 {
        return Err(GrodError::EmptyInput);
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grads = Array2::zeros(logits.raw_dim());
    let (mut l1, mut l2) = (T::zero(), T::zero());
    for i in 0..n {
        let (y, z) = (labels.row(i), logits.row(i));
        l1 += loss_l1(y, z);
        l2 += loss_l2(y, z);
        grads
            .row_mut(i)
            .assign(&(loss_grad_logits(y, z, gamma) * inv_n));
    }
    l1 *= inv_n;
    l2 *= inv_n;
    let total = (T::one() - gamma) * l1 + gamma * l2;
    Ok((BatchLoss { total, l1, l2 }, grads))
}
