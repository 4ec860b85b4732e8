//! Synthetic Gaussian-mixture datasets.
//!
//! All draws come from a `ChaCha8Rng` seeded with `seed_from_u64(seed)`;
//! normals use `rand_distr::StandardNormal`. The draw order is part of the
//! contract: component parameters first (class 1, class 2, then OOD; mean
//! before spread, axis 0 before axis 1), then samples component by
//! component.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureBatch;
use crate::error::{GrodError, Result};
use crate::scalar::Scalar;

/// Axis-aligned Gaussian; `std[j]` is the standard deviation along axis `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub count: usize,
}

impl GaussianSpec {
    /// Diagonal covariance `diag(std²)`.
    pub fn cov(&self) -> Array2<f64> {
        Array2::from_diag(&self.std.mapv(|s| s * s))
    }

    /// Acceptance radius of the 3σ filter, `3·max_j std[j]`.
    pub fn radius(&self) -> f64 {
        3.0 * self.std.iter().copied().fold(0.0, f64::max)
    }

    /// Draw `count` samples, rejecting any farther than [`radius`](Self::radius)
    /// from the mean.
    pub fn sample<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Array2<T> {
        let d = self.mean.len();
        let radius = self.radius();
        let mut out = Array2::<T>::zeros((self.count, d));
        let mut filled = 0;
        while filled < self.count {
            let x: Array1<f64> =
                Array1::from_shape_fn(d, |j| self.mean[j] + self.std[j] * rng.sample::<f64, _>(StandardNormal));
            let dist = (&x - &self.mean).mapv(|v| v * v).sum().sqrt();
            if dist <= radius {
                out.row_mut(filled).assign(&x.mapv(T::lit));
                filled += 1;
            }
        }
        out
    }
}

fn abs_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal).abs()
}

/// Two ID components, one OOD component, split into train/test/OOD sets.
#[derive(Debug, Clone, PartialEq)]
pub struct AppendixCData<T> {
    pub classes: Vec<GaussianSpec>,
    pub ood: GaussianSpec,
    /// ID training rows, labels 0 and 1.
    pub train: FeatureBatch<T>,
    pub test: FeatureBatch<T>,
    /// OOD rows, labelled 2 (the extra class).
    pub ood_set: FeatureBatch<T>,
}

pub const APPENDIX_C_TRAIN_PER_COMPONENT: usize = 1000;
pub const APPENDIX_C_TEST_PER_COMPONENT: usize = 500;

/// Component parameters of the two-class 2-D mixture:
///
/// ```text
/// μⁱ = (i/10)·(|N|, |N|),   σⱼⁱ = (i/10)·|N| + 0.1,  i = 1, 2
/// μᴼ = ½·(−|N|, −|N|),       σⱼᴼ = 0.2·|N| + 0.1
/// ```
pub fn appendix_c_components(rng: &mut ChaCha8Rng) -> (Vec<GaussianSpec>, GaussianSpec) {
    let mut classes = Vec::with_capacity(2);
    for i in 1..=2 {
        let scale = i as f64 / 10.0;
        let mean = Array1::from_shape_fn(2, |_| scale * abs_normal(rng));
        let std = Array1::from_shape_fn(2, |_| scale * abs_normal(rng) + 0.1);
        classes.push(GaussianSpec { mean, std, count: 0 });
    }
    let mean = Array1::from_shape_fn(2, |_| -0.5 * abs_normal(rng));
    let std = Array1::from_shape_fn(2, |_| 0.2 * abs_normal(rng) + 0.1);
    (classes, GaussianSpec { mean, std, count: 0 })
}

/// The 2-D Gaussian-mixture benchmark with 3σ filtering.
pub fn gen_appendix_c<T: Scalar>(
    seed: u64,
    train_per_component: usize,
    test_per_component: usize,
) -> AppendixCData<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut classes, mut ood) = appendix_c_components(&mut rng);
    let mut train_parts = Vec::new();
    let mut test_parts = Vec::new();
    for (label, spec) in classes.iter_mut().enumerate() {
        spec.count = train_per_component;
        let tr = spec.sample::<T>(&mut rng);
        spec.count = test_per_component;
        let te = spec.sample::<T>(&mut rng);
        train_parts.push(FeatureBatch { labels: vec![label; tr.nrows()], features: tr });
        test_parts.push(FeatureBatch { labels: vec![label; te.nrows()], features: te });
    }
    ood.count = test_per_component;
    let ood_rows = ood.sample::<T>(&mut rng);
    let k = classes.len();
    let ood_set = FeatureBatch { labels: vec![k; ood_rows.nrows()], features: ood_rows };
    let train = FeatureBatch::concat(&train_parts.iter().collect::<Vec<_>>()).expect("same width");
    let test = FeatureBatch::concat(&test_parts.iter().collect::<Vec<_>>()).expect("same width");
    AppendixCData { classes, ood, train, test, ood_set }
}

/// Centres at `±(separation/√2)·e_j`, positive axes first, so that the
/// minimum pairwise distance is exactly `separation`. Requires `K ≤ 2s`.
pub fn cluster_centres(k: usize, s: usize, separation: f64) -> Result<Array2<f64>> {
    if k < 2 || s < 2 {
        return Err(GrodError::InvalidArgument(format!("need K ≥ 2 and s ≥ 2, got K={k}, s={s}")));
    }
    if k > 2 * s {
        return Err(GrodError::InvalidArgument(format!("at most 2s = {} classes fit, got {k}", 2 * s)));
    }
    let r = separation / 2f64.sqrt();
    let mut c = Array2::zeros((k, s));
    for i in 0..k {
        let (axis, sign) = if i < s { (i, 1.0) } else { (i - s, -1.0) };
        c[[i, axis]] = sign * r;
    }
    Ok(c)
}

/// `K` unit-variance isotropic clusters in `ℝˢ`, rows ordered by class.
pub fn gen_feature_set<T: Scalar>(
    k: usize,
    s: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<FeatureBatch<T>> {
    let centres = cluster_centres(k, s, separation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Array2::<T>::zeros((k * n_per_class, s));
    let mut labels = Vec::with_capacity(k * n_per_class);
    for class in 0..k {
        for i in 0..n_per_class {
            let row = class * n_per_class + i;
            for j in 0..s {
                let z: f64 = rng.sample(StandardNormal);
                features[[row, j]] = T::lit(centres[[class, j]] + z);
            }
            labels.push(class);
        }
    }
    Ok(FeatureBatch { features, labels })
}
