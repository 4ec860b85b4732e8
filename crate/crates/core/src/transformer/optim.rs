use serde::{Deserialize, Serialize};

use super::{Gradients, TransformerModel};
use crate::scalar::Scalar;

pub trait Optimizer<T: Scalar> {
    /// Update `params[i]` from `grads[i]`; the list must keep the same
    /// length and order across calls.
    fn update(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>);

    fn step(&mut self, model: &mut TransformerModel<T>, grads: &Gradients<T>) {
        let g = grads.tensors().into_iter().map(|(g, _)| g).collect();
        self.update(model.tensors_mut(), g);
    }

    /// Update the classifier head only; the backbone is left untouched,
    /// weight decay included.
    fn step_head(&mut self, model: &mut TransformerModel<T>, grads: &Gradients<T>) {
        let all = grads.tensors();
        let g = all[all.len() - 4..].iter().map(|(g, _)| *g).collect();
        self.update(model.head_tensors_mut(), g);
    }
}

/// Plain gradient descent with L2-style decay: `p ← p − lr·(g + wd·p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd<T> {
    pub lr: T,
    pub weight_decay: T,
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn update(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        for (p, g) in params.into_iter().zip(grads) {
            for (pv, &gv) in p.iter_mut().zip(g) {
                *pv -= self.lr * (gv + self.weight_decay * *pv);
            }
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Each step first shrinks `p ← p·(1 − lr·wd)`, then applies the
/// bias-corrected Adam update `p ← p − lr·m̂/(√v̂ + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW<T> {
    pub lr: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: T, weight_decay: T) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for AdamW<T> {
    fn update(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let shrink = T::one() - self.lr * self.weight_decay;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] = p[j] * shrink - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
