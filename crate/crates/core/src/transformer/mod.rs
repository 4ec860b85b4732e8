//! Residual attention/feed-forward transformer with a (K+1)-way head.
//!
//! Hidden states are `d̂ × τ` matrices whose columns are tokens. A block is
//!
//! ```text
//! Att(h) = h + Σᵢ W_Oⁱ W_Vⁱ h · σ[(W_Kⁱ h)ᵀ W_Qⁱ h]
//! FF(h)  = Att(h) + W₂ ReLU(W₁ Att(h) + b₁1ᵀ) + b₂1ᵀ
//! ```
//!
//! with `σ` the column-wise softmax. There is no layer norm and no
//! `1/√m_h` scaling. The head computes one logit per output `k`:
//! `f^k = W₄,ₖ (W₃,ₖ h + b₃,ₖ)ᵀ + b₄,ₖ`.
//!
//! The same struct doubles as the gradient container returned by
//! [`TransformerModel::backward`].

mod checkpoint;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{AdamW, Optimizer, Sgd};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GrodError, Result};
use crate::numerics::column_softmax;
use crate::scalar::Scalar;

/// Width of one block: `m = (d̂, h, m_h, m_V, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub d_hat: usize,
    pub heads: usize,
    pub m_h: usize,
    pub m_v: usize,
    pub r: usize,
}

impl Budget {
    pub fn new(d_hat: usize, heads: usize, m_h: usize, m_v: usize, r: usize) -> Result<Self> {
        let b = Budget { d_hat, heads, m_h, m_v, r };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_hat, self.heads, self.m_h, self.m_v, self.r].contains(&0) {
            return Err(GrodError::InvalidArgument(format!(
                "budget entries must be ≥ 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_hat0: usize,
    pub tau: usize,
    pub depth: usize,
    pub budget: Budget,
    /// Number of logits, `K + 1`.
    pub outputs: usize,
}

impl ModelShape {
    pub fn feature_dim(&self) -> usize {
        self.budget.d_hat * self.tau
    }

    pub fn input_dim(&self) -> usize {
        self.d_hat0 * self.tau
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.d_hat0 == 0 || self.tau == 0 || self.outputs < 2 {
            return Err(GrodError::InvalidArgument(format!("invalid model shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead<T> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_o: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub heads: Vec<AttentionHead<T>>,
    pub w1: Array2<T>,
    pub w2: Array2<T>,
    pub b1: Array1<T>,
    pub b2: Array1<T>,
}

/// Row `k` of every field belongs to output `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    /// `(K+1) × d̂`
    pub w3: Array2<T>,
    /// `(K+1) × τ`
    pub b3: Array2<T>,
    /// `(K+1) × τ`
    pub w4: Array2<T>,
    pub b4: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T> {
    pub shape: ModelShape,
    /// One-layer affine input map on the flattened `d̂₀ × τ` input.
    pub w_in: Array2<T>,
    pub b_in: Array1<T>,
    pub blocks: Vec<Block<T>>,
    pub head: ClassifierHead<T>,
}

/// Gradients share the parameter layout.
pub type Gradients<T> = TransformerModel<T>;

#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    pub hidden: Array2<T>,
    pub logits: Array1<T>,
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Array2<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Array2<T>,
    heads: Vec<HeadCache<T>>,
    att_out: Array2<T>,
    pre_act: Array2<T>,
}

/// Intermediate values kept for [`TransformerModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input_flat: Array1<T>,
    blocks: Vec<BlockCache<T>>,
    hidden: Array2<T>,
    head_inner: Array2<T>,
}

impl<T> ForwardCache<T> {
    pub fn hidden(&self) -> &Array2<T> {
        &self.hidden
    }

    /// `W₃ h + b₃` from the head pass.
    pub fn head_inner(&self) -> &Array2<T> {
        &self.head_inner
    }
}

/// Sinusoidal position code for a `d × τ` token matrix.
pub fn position_encoding<T: Scalar>(d: usize, tau: usize) -> Array2<T> {
    Array2::from_shape_fn((d, tau), |(i, t)| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = t as f64 / rate;
        T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

fn relu<T: Scalar>(m: &Array2<T>) -> Array2<T> {
    m.mapv(|v| v.max(T::zero()))
}

fn bias_cols<T: Scalar>(b: &Array1<T>, tau: usize) -> Array2<T> {
    b.view()
        .insert_axis(Axis(1))
        .broadcast((b.len(), tau))
        .unwrap()
        .to_owned()
}

impl<T: Scalar> TransformerModel<T> {
    /// All parameters zero.
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let b = shape.budget;
        let d = shape.feature_dim();
        let block = Block {
            heads: vec![
                AttentionHead {
                    w_q: Array2::zeros((b.m_h, b.d_hat)),
                    w_k: Array2::zeros((b.m_h, b.d_hat)),
                    w_v: Array2::zeros((b.m_v, b.d_hat)),
                    w_o: Array2::zeros((b.d_hat, b.m_v)),
                };
                b.heads
            ],
            w1: Array2::zeros((b.r, b.d_hat)),
            w2: Array2::zeros((b.d_hat, b.r)),
            b1: Array1::zeros(b.r),
            b2: Array1::zeros(b.d_hat),
        };
        Ok(TransformerModel {
            shape,
            w_in: Array2::zeros((d, shape.input_dim())),
            b_in: Array1::zeros(d),
            blocks: vec![block; shape.depth],
            head: ClassifierHead {
                w3: Array2::zeros((shape.outputs, b.d_hat)),
                b3: Array2::zeros((shape.outputs, shape.tau)),
                w4: Array2::zeros((shape.outputs, shape.tau)),
                b4: Array1::zeros(shape.outputs),
            },
        })
    }

    /// Weights uniform in `(−0.1, 0.1)`, biases zero.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = T::lit(-0.1);
        let hi = T::lit(0.1);
        for w in model.weight_matrices_mut() {
            w.mapv_inplace(|_| rng.random_range(lo..hi));
        }
        Ok(model)
    }

    /// Depth-0 model whose input map is the identity, so `hidden == input`.
    ///
    /// Used when features come from an external extractor and only the
    /// head is trained.
    pub fn identity_backbone(dim: usize, outputs: usize, seed: u64) -> Result<Self> {
        let shape = ModelShape {
            d_hat0: dim,
            tau: 1,
            depth: 0,
            budget: Budget::new(dim, 1, 1, 1, 1)?,
            outputs,
        };
        let mut model = Self::init(shape, seed)?;
        model.w_in = Array2::eye(dim);
        Ok(model)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape).expect("shape already validated")
    }

    fn weight_matrices_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = vec![&mut self.w_in];
        for block in &mut self.blocks {
            for h in &mut block.heads {
                out.extend([&mut h.w_q, &mut h.w_k, &mut h.w_v, &mut h.w_o]);
            }
            out.extend([&mut block.w1, &mut block.w2]);
        }
        out.extend([&mut self.head.w3, &mut self.head.w4]);
        out
    }

    /// Every parameter tensor with its `(rows, cols)` shape, in a fixed order.
    pub fn tensors(&self) -> Vec<(&[T], [usize; 2])> {
        fn m2<T>(a: &Array2<T>) -> (&[T], [usize; 2]) {
            (a.as_slice().expect("standard layout"), [a.nrows(), a.ncols()])
        }
        fn m1<T>(a: &Array1<T>) -> (&[T], [usize; 2]) {
            (a.as_slice().expect("standard layout"), [a.len(), 1])
        }
        let mut out = vec![m2(&self.w_in), m1(&self.b_in)];
        for block in &self.blocks {
            for h in &block.heads {
                out.extend([m2(&h.w_q), m2(&h.w_k), m2(&h.w_v), m2(&h.w_o)]);
            }
            out.extend([m2(&block.w1), m2(&block.w2), m1(&block.b1), m1(&block.b2)]);
        }
        out.extend([
            m2(&self.head.w3),
            m2(&self.head.b3),
            m2(&self.head.w4),
            m1(&self.head.b4),
        ]);
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        fn s2<T>(a: &mut Array2<T>) -> &mut [T] {
            a.as_slice_mut().expect("standard layout")
        }
        fn s1<T>(a: &mut Array1<T>) -> &mut [T] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out = vec![s2(&mut self.w_in), s1(&mut self.b_in)];
        for block in &mut self.blocks {
            for h in &mut block.heads {
                out.push(s2(&mut h.w_q));
                out.push(s2(&mut h.w_k));
                out.push(s2(&mut h.w_v));
                out.push(s2(&mut h.w_o));
            }
            out.push(s2(&mut block.w1));
            out.push(s2(&mut block.w2));
            out.push(s1(&mut block.b1));
            out.push(s1(&mut block.b2));
        }
        out.push(s2(&mut self.head.w3));
        out.push(s2(&mut self.head.b3));
        out.push(s2(&mut self.head.w4));
        out.push(s1(&mut self.head.b4));
        out
    }

    /// Head tensors only (tail of [`tensors_mut`](Self::tensors_mut)).
    pub fn head_tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.head.w3.as_slice_mut().expect("standard layout"),
            self.head.b3.as_slice_mut().expect("standard layout"),
            self.head.w4.as_slice_mut().expect("standard layout"),
            self.head.b4.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(s, _)| s.len()).sum()
    }

    /// `true` when every parameter is finite.
    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(s, _)| s.iter().all(|v| v.is_finite()))
    }

    /// Map a `d̂ × τ` hidden state to the flat feature vector (row-major).
    pub fn flatten_hidden(hidden: &Array2<T>) -> Array1<T> {
        Array1::from_iter(hidden.iter().copied())
    }

    /// Inverse of [`flatten_hidden`](Self::flatten_hidden).
    pub fn unflatten_hidden(&self, feature: ArrayView1<T>) -> Result<Array2<T>> {
        let d = self.shape.budget.d_hat;
        let tau = self.shape.tau;
        if feature.len() != d * tau {
            return Err(GrodError::DimensionMismatch {
                expected: d * tau,
                got: feature.len(),
            });
        }
        Ok(Array2::from_shape_vec((d, tau), feature.to_vec()).expect("length checked"))
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.dim() != (self.shape.d_hat0, self.shape.tau) {
            return Err(GrodError::ShapeMismatch(format!(
                "input is {}x{}, model expects {}x{}",
                x.nrows(),
                x.ncols(),
                self.shape.d_hat0,
                self.shape.tau
            )));
        }
        Ok(())
    }

    fn embed(&self, x: ArrayView2<T>) -> (Array1<T>, Array2<T>) {
        let tau = self.shape.tau;
        let mut x = x.to_owned();
        if tau > 1 {
            x = x + position_encoding::<T>(self.shape.d_hat0, tau);
        }
        let flat = Array1::from_iter(x.iter().copied());
        let h = self.w_in.dot(&flat) + &self.b_in;
        let h = h
            .into_shape_with_order((self.shape.budget.d_hat, tau))
            .expect("input map output matches d̂ × τ");
        (flat, h)
    }

    /// Hidden state and logits for one `d̂₀ × τ` input.
    pub fn forward(&self, x: ArrayView2<T>) -> Result<Forward<T>> {
        let (fwd, _) = self.forward_cached(x)?;
        Ok(fwd)
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> Result<(Forward<T>, ForwardCache<T>)> {
        self.check_input(&x)?;
        let tau = self.shape.tau;
        let (input_flat, mut h) = self.embed(x);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut att = h.clone();
            let mut head_caches = Vec::with_capacity(block.heads.len());
            for head in &block.heads {
                let q = head.w_q.dot(&h);
                let k = head.w_k.dot(&h);
                let v = head.w_v.dot(&h);
                let attn = column_softmax(k.t().dot(&q).view());
                att = att + head.w_o.dot(&v.dot(&attn));
                head_caches.push(HeadCache { q, k, v, attn });
            }
            let pre_act = block.w1.dot(&att) + bias_cols(&block.b1, tau);
            let out = &att + &block.w2.dot(&relu(&pre_act)) + bias_cols(&block.b2, tau);
            caches.push(BlockCache {
                input: h,
                heads: head_caches,
                att_out: att,
                pre_act,
            });
            h = out;
        }
        let (logits, head_inner) = self.head_forward(h.view());
        let cache = ForwardCache {
            input_flat,
            blocks: caches,
            hidden: h.clone(),
            head_inner,
        };
        Ok((Forward { hidden: h, logits }, cache))
    }

    /// Head applied to a hidden state; also returns `W₃ h + b₃` (`(K+1) × τ`).
    pub fn head_forward(&self, hidden: ArrayView2<T>) -> (Array1<T>, Array2<T>) {
        let inner = self.head.w3.dot(&hidden) + &self.head.b3;
        let logits = (&inner * &self.head.w4).sum_axis(Axis(1)) + &self.head.b4;
        (logits, inner)
    }

    /// Logits for a flat feature vector fed straight into the head.
    pub fn head_logits(&self, feature: ArrayView1<T>) -> Result<Array1<T>> {
        let h = self.unflatten_hidden(feature)?;
        Ok(self.head_forward(h.view()).0)
    }

    /// Accumulate head gradients into `grads` and return `∂L/∂hidden`.
    pub fn head_backward(
        &self,
        hidden: ArrayView2<T>,
        inner: ArrayView2<T>,
        dlogits: ArrayView1<T>,
        grads: &mut Gradients<T>,
    ) -> Array2<T> {
        let g = dlogits.insert_axis(Axis(1));
        grads.head.b4 += &dlogits;
        grads.head.w4 += &(&inner * &g);
        let dinner = &self.head.w4 * &g;
        grads.head.b3 += &dinner;
        grads.head.w3 += &dinner.dot(&hidden.t());
        self.head.w3.t().dot(&dinner)
    }

    /// Gradients of `Σₖ dlogits[k]·f^k` w.r.t. every parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: ArrayView1<T>) -> Gradients<T> {
        let mut grads = self.zeros_like();
        self.backward_into(cache, dlogits, &mut grads);
        grads
    }

    /// Like [`backward`](Self::backward) but accumulating into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<T>,
        dlogits: ArrayView1<T>,
        grads: &mut Gradients<T>,
    ) {
        let mut dh = self.head_backward(
            cache.hidden.view(),
            cache.head_inner.view(),
            dlogits,
            grads,
        );
        for (idx, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[idx];
            let gb = &mut grads.blocks[idx];
            // feed-forward
            let act = relu(&bc.pre_act);
            gb.w2 += &dh.dot(&act.t());
            gb.b2 += &dh.sum_axis(Axis(1));
            let mut dpre = block.w2.t().dot(&dh);
            dpre.zip_mut_with(&bc.pre_act, |d, &z| {
                if z <= T::zero() {
                    *d = T::zero();
                }
            });
            gb.w1 += &dpre.dot(&bc.att_out.t());
            gb.b1 += &dpre.sum_axis(Axis(1));
            let datt = &dh + &block.w1.t().dot(&dpre);
            // attention
            let h = &bc.input;
            let mut dinput = datt.clone();
            for (hi, head) in block.heads.iter().enumerate() {
                let hc = &bc.heads[hi];
                let gh = &mut gb.heads[hi];
                let pv = hc.v.dot(&hc.attn);
                gh.w_o += &datt.dot(&pv.t());
                let dpv = head.w_o.t().dot(&datt);
                let dv = dpv.dot(&hc.attn.t());
                let da = hc.v.t().dot(&dpv);
                let mut ds = Array2::<T>::zeros(da.raw_dim());
                for j in 0..da.ncols() {
                    let col_a = hc.attn.column(j);
                    let col_d = da.column(j);
                    let dot: T = col_a.iter().zip(col_d.iter()).map(|(&a, &d)| a * d).sum();
                    for i in 0..da.nrows() {
                        ds[[i, j]] = col_a[i] * (col_d[i] - dot);
                    }
                }
                let dk = hc.q.dot(&ds.t());
                let dq = hc.k.dot(&ds);
                gh.w_v += &dv.dot(&h.t());
                gh.w_k += &dk.dot(&h.t());
                gh.w_q += &dq.dot(&h.t());
                dinput = dinput
                    + head.w_v.t().dot(&dv)
                    + head.w_k.t().dot(&dk)
                    + head.w_q.t().dot(&dq);
            }
            dh = dinput;
        }
        let dflat = Array1::from_iter(dh.iter().copied());
        grads.b_in += &dflat;
        grads.w_in += &dflat
            .view()
            .insert_axis(Axis(1))
            .dot(&cache.input_flat.view().insert_axis(Axis(0)));
    }

    /// Multiply every gradient entry by `factor`.
    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// `argmax_k f^k`, lowest index on ties. Returns a 0-based index; the
/// OOD output is `logits.len() − 1`.
pub fn classify_max<T: Scalar>(logits: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

/// Score-based rule: the OOD index when `score < lambda`, else argmax.
pub fn classify_scored<T: Scalar>(logits: ArrayView1<T>, score: T, lambda: T) -> usize {
    if score < lambda {
        logits.len() - 1
    } else {
        classify_max(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tiny_shape(tau: usize, depth: usize) -> ModelShape {
        ModelShape {
            d_hat0: 2,
            tau,
            depth,
            budget: Budget::new(2, 2, 1, 1, 4).unwrap(),
            outputs: 3,
        }
    }

    #[test]
    fn zero_blocks_are_identity() {
        let mut m = TransformerModel::<f64>::zeros(tiny_shape(2, 3)).unwrap();
        m.w_in = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        m.b_in = array![0.1, -0.2, 0.3, 0.0];
        m.head.b4 = array![0.5, -1.0, 2.0];
        let x = array![[0.3, -0.7], [1.1, 0.4]];
        let fwd = m.forward(x.view()).unwrap();
        let (_, h0) = m.embed(x.view());
        assert_eq!(fwd.hidden, h0);
        assert_eq!(fwd.logits, m.head.b4);
    }

    #[test]
    fn single_token_attention_is_linear() {
        let mut m = TransformerModel::<f64>::init(tiny_shape(1, 1), 9).unwrap();
        let b = &mut m.blocks[0];
        b.w1.fill(0.0);
        b.w2.fill(0.0);
        let x = array![[0.4], [-0.9]];
        let fwd = m.forward(x.view()).unwrap();
        let (_, h0) = m.embed(x.view());
        let mut expect = h0.clone();
        for head in &m.blocks[0].heads {
            expect = expect + head.w_o.dot(&head.w_v.dot(&h0));
        }
        for (a, e) in fwd.hidden.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(*a, *e, epsilon = 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_forward() {
        // d̂₀ = d̂ = 1, τ = 2, one head, K + 1 = 2
        let shape = ModelShape {
            d_hat0: 1,
            tau: 2,
            depth: 1,
            budget: Budget::new(1, 1, 1, 1, 1).unwrap(),
            outputs: 2,
        };
        let mut m = TransformerModel::<f64>::zeros(shape).unwrap();
        m.w_in = array![[1.0, 0.0], [0.0, 1.0]];
        let b = &mut m.blocks[0];
        b.heads[0].w_q = array![[1.0]];
        b.heads[0].w_k = array![[2.0]];
        b.heads[0].w_v = array![[0.5]];
        b.heads[0].w_o = array![[1.0]];
        b.w1 = array![[1.0]];
        b.w2 = array![[-1.0]];
        b.b1 = array![0.5];
        b.b2 = array![0.25];
        m.head.w3 = array![[1.0], [2.0]];
        m.head.b3 = array![[0.0, 1.0], [0.5, 0.0]];
        m.head.w4 = array![[1.0, -1.0], [0.5, 0.5]];
        m.head.b4 = array![0.1, -0.1];
        // Position code for d = 1, τ = 2: row 0 is sin(t) → (0, sin 1).
        let x = array![[1.0, 2.0]];
        let s1 = 1f64.sin();
        let h = [1.0, 2.0 + s1];
        // scores S[i][j] = (2 hᵢ)(hⱼ)
        let s = |i: usize, j: usize| 2.0 * h[i] * h[j];
        let col = |j: usize| {
            let e0 = s(0, j).exp();
            let e1 = s(1, j).exp();
            (e0 / (e0 + e1), e1 / (e0 + e1))
        };
        let att: Vec<f64> = (0..2)
            .map(|j| {
                let (a0, a1) = col(j);
                h[j] + 0.5 * (h[0] * a0 + h[1] * a1)
            })
            .collect();
        let out: Vec<f64> = att
            .iter()
            .map(|&a| a - (a + 0.5f64).max(0.0) + 0.25)
            .collect();
        let f0 = (out[0] + 0.0) * 1.0 + -(out[1] + 1.0) + 0.1;
        let f1 = (2.0 * out[0] + 0.5) * 0.5 + (2.0 * out[1]) * 0.5 - 0.1;
        let fwd = m.forward(x.view()).unwrap();
        assert_abs_diff_eq!(fwd.hidden[[0, 0]], out[0], epsilon = 1e-10);
        assert_abs_diff_eq!(fwd.hidden[[0, 1]], out[1], epsilon = 1e-10);
        assert_abs_diff_eq!(fwd.logits[0], f0, epsilon = 1e-10);
        assert_abs_diff_eq!(fwd.logits[1], f1, epsilon = 1e-10);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = TransformerModel::<f64>::init(tiny_shape(1, 1), 0).unwrap();
        let x = Array2::<f64>::zeros((3, 1));
        assert!(matches!(m.forward(x.view()), Err(GrodError::ShapeMismatch(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = TransformerModel::<f64>::init(tiny_shape(2, 2), 4).unwrap();
        let x = array![[0.3, -0.2], [0.9, 0.1]];
        let (_, cache) = m.forward_cached(x.view()).unwrap();
        let g = m.backward(&cache, Array1::zeros(3).view());
        assert!(g.tensors().iter().all(|(s, _)| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn head_gradient_closed_form() {
        let m = TransformerModel::<f64>::init(tiny_shape(2, 0), 8).unwrap();
        let hidden = array![[0.5, -1.0], [2.0, 0.25]];
        let (_, inner) = m.head_forward(hidden.view());
        let up = array![1.0, -0.5, 0.25];
        let mut g = m.zeros_like();
        let dh = m.head_backward(hidden.view(), inner.view(), up.view(), &mut g);
        for k in 0..3 {
            assert_eq!(g.head.b4[k], up[k]);
            for t in 0..2 {
                // ∂f^k/∂W₄[k,t] = (W₃,ₖ h + b₃,ₖ)[t]
                assert_abs_diff_eq!(g.head.w4[[k, t]], up[k] * inner[[k, t]], epsilon = 1e-15);
                assert_abs_diff_eq!(g.head.b3[[k, t]], up[k] * m.head.w4[[k, t]], epsilon = 1e-15);
            }
            for i in 0..2 {
                let expect: f64 = (0..2).map(|t| up[k] * m.head.w4[[k, t]] * hidden[[i, t]]).sum();
                assert_abs_diff_eq!(g.head.w3[[k, i]], expect, epsilon = 1e-15);
            }
        }
        for i in 0..2 {
            for t in 0..2 {
                let expect: f64 = (0..3).map(|k| up[k] * m.head.w4[[k, t]] * m.head.w3[[k, i]]).sum();
                assert_abs_diff_eq!(dh[[i, t]], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn classify_rules() {
        assert_eq!(classify_max(array![0.1, 0.9, 0.2].view()), 1);
        assert_eq!(classify_max(array![0.3, 0.3, 0.3].view()), 0);
        assert_eq!(classify_max(array![-1.0, -2.0, 5.0].view()), 2);
        // K = 2, OOD index 2
        assert_eq!(classify_scored(array![0.9, 0.1, 0.0].view(), 0.4, 0.5), 2);
        assert_eq!(classify_scored(array![0.1, 0.9, 0.0].view(), 0.9, 0.5), 1);
        assert_eq!(classify_scored(array![0.1, 0.9, 0.0].view(), 0.5, 0.5), 1);
    }

    #[test]
    fn forward_is_bit_stable() {
        let m = TransformerModel::<f64>::init(tiny_shape(2, 3), 21).unwrap();
        let x = array![[0.3, -0.2], [0.9, 0.1]];
        let a = m.forward(x.view()).unwrap();
        let b = m.forward(x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn position_code_skipped_for_single_token() {
        let mut m = TransformerModel::<f64>::zeros(tiny_shape(1, 0)).unwrap();
        m.w_in = Array2::eye(2);
        let x = array![[0.7], [-0.3]];
        assert_eq!(m.forward(x.view()).unwrap().hidden, x);
    }
}
