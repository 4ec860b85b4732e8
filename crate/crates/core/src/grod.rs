//! Fake-OOD synthesis in feature space.
//!
//! Per training batch: pick the well-populated classes, track EMA centres
//! and covariances, mine boundary rows along PCA and per-class LDA axes,
//! push them outward by `a`, sample Gaussian clouds around the pushed
//! points, drop candidates that sit too close to the ID data in Mahalanobis
//! terms, cap the survivors at `⌊B/K⌋ + 2` and attach soft labels over
//! `K + 1` outputs.
//!
//! The first `warmup_batches` batches only feed a pool the state is
//! initialized from; they pass through unchanged.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GrodError, Result};
use crate::numerics::{column_mean, covariance_or_ridge, mahalanobis_sq, regularized_inverse};
use crate::projections::{
    default_lda_axes, default_pca_axes, lda_fit, mine_boundary, mine_class_boundary, pca_fit,
    BoundarySet, BoundarySource,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrodConfig {
    /// Extension length of boundary points.
    pub a: f64,
    /// Weight of the binary ID/OOD loss term.
    pub gamma: f64,
    /// EMA rate for centres, covariances and reference distances.
    pub gamma_opt: f64,
    /// Samples per provenance group; `None` means `max(8, ⌈B/(κ+1)⌉)`.
    pub num: Option<usize>,
    pub warmup_batches: usize,
    pub lambda_filter: f64,
    /// Rate of the optional λ update; 0 keeps λ fixed.
    pub lambda_adapt: f64,
    pub eps: f64,
    pub eps0: f64,
    pub pca_axes: Option<usize>,
    pub lda_axes: Option<usize>,
}

impl Default for GrodConfig {
    fn default() -> Self {
        GrodConfig {
            a: 0.1,
            gamma: 0.1,
            gamma_opt: 0.1,
            num: None,
            warmup_batches: 5,
            lambda_filter: 0.1,
            lambda_adapt: 0.0,
            eps: 1e-7,
            eps0: 1e-4,
            pca_axes: None,
            lda_axes: None,
        }
    }
}

impl GrodConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GrodError::InvalidArgument(m.into()));
        if !(self.a > 0.0 && self.a.is_finite()) {
            return bad("a must be > 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.gamma_opt > 0.0 && self.gamma_opt <= 1.0) {
            return bad("gamma_opt must lie in (0, 1]");
        }
        if !(self.lambda_filter >= 0.0) {
            return bad("lambda_filter must be ≥ 0");
        }
        if !(self.lambda_adapt >= 0.0 && self.lambda_adapt <= 1.0) {
            return bad("lambda_adapt must lie in [0, 1]");
        }
        if !(self.eps > 0.0 && self.eps0 > 0.0) {
            return bad("eps and eps0 must be > 0");
        }
        if self.num == Some(0) || self.pca_axes == Some(0) || self.lda_axes == Some(0) {
            return bad("num, pca_axes and lda_axes must be ≥ 1");
        }
        Ok(())
    }

    /// Samples per group for a batch of `b` rows and `kappa` selected classes.
    pub fn num_for(&self, b: usize, kappa: usize) -> usize {
        self.num.unwrap_or_else(|| 8.max(b.div_ceil(kappa + 1)))
    }
}

/// `prev·(1−γ) + new·γ`.
pub fn ema<T: Scalar>(prev: T, new: T, gamma_opt: T) -> T {
    (T::one() - gamma_opt) * prev + gamma_opt * new
}

/// Centre, covariance and mean squared Mahalanobis distance of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats<T> {
    pub mean: Array1<T>,
    pub cov: Array2<T>,
    /// `(cov + eps0·I)⁻¹`, refreshed whenever `cov` changes.
    pub cov_inv: Array2<T>,
    pub dist_id: T,
}

impl<T: Scalar> ClusterStats<T> {
    fn fit(rows: ArrayView2<T>, eps0: T) -> Result<Self> {
        let mean = column_mean(rows)?;
        let cov = covariance_or_ridge(rows, eps0);
        let cov_inv = regularized_inverse(cov.view(), eps0)?;
        let mut s = ClusterStats { mean, cov, cov_inv, dist_id: T::zero() };
        s.dist_id = s.mean_distance(rows)?;
        Ok(s)
    }

    fn update(&mut self, rows: ArrayView2<T>, gamma_opt: T, eps0: T) -> Result<()> {
        let batch_mean = column_mean(rows)?;
        let batch_cov = covariance_or_ridge(rows, eps0);
        let keep = T::one() - gamma_opt;
        self.mean = &self.mean * keep + &(batch_mean * gamma_opt);
        self.cov = &self.cov * keep + &(batch_cov * gamma_opt);
        self.cov_inv = regularized_inverse(self.cov.view(), eps0)?;
        let d = self.mean_distance(rows)?;
        self.dist_id = ema(self.dist_id, d, gamma_opt);
        Ok(())
    }

    pub fn distance(&self, v: ArrayView1<T>) -> Result<T> {
        mahalanobis_sq(v, self.mean.view(), self.cov_inv.view())
    }

    /// Mean squared Mahalanobis distance of `rows` to this cluster.
    pub fn mean_distance(&self, rows: ArrayView2<T>) -> Result<T> {
        if rows.nrows() == 0 {
            return Err(GrodError::EmptyInput);
        }
        let mut total = T::zero();
        for r in rows.rows() {
            total += self.distance(r)?;
        }
        Ok(total / T::from_usize(rows.nrows()).unwrap())
    }
}

/// Running statistics carried across batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrodState<T> {
    pub classes: usize,
    pub dim: usize,
    /// Batches seen so far, warmup included.
    pub batch_index: usize,
    pub pca: Option<ClusterStats<T>>,
    /// Per-class statistics, `None` until a class has ≥ 2 rows in the pool
    /// or a selected batch.
    pub lda: Vec<Option<ClusterStats<T>>>,
    /// Current filter strength λ.
    pub lambda_filter: f64,
    pool_features: Vec<Array2<T>>,
    pool_labels: Vec<usize>,
}

impl<T: Scalar> GrodState<T> {
    pub fn new(classes: usize, dim: usize, config: &GrodConfig) -> Self {
        GrodState {
            classes,
            dim,
            batch_index: 0,
            pca: None,
            lda: vec![None; classes],
            lambda_filter: config.lambda_filter,
            pool_features: Vec::new(),
            pool_labels: Vec::new(),
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.pca.is_some()
    }

    /// Initialize every statistic from the given rows (the warmup pool).
    pub fn initialize(&mut self, f: ArrayView2<T>, y: &[usize], eps0: T) -> Result<()> {
        check_batch(f, y, self.dim, self.classes)?;
        self.pca = Some(ClusterStats::fit(f, eps0)?);
        for (c, slot) in self.lda.iter_mut().enumerate() {
            let rows = class_rows(y, c);
            *slot = if rows.len() >= 2 {
                Some(ClusterStats::fit(f.select(Axis(0), &rows).view(), eps0)?)
            } else {
                None
            };
        }
        Ok(())
    }

    fn flush_pool(&mut self, eps0: T) -> Result<()> {
        let views: Vec<_> = self.pool_features.iter().map(|m| m.view()).collect();
        let pool = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| GrodError::ShapeMismatch(e.to_string()))?;
        let labels = std::mem::take(&mut self.pool_labels);
        self.pool_features.clear();
        self.initialize(pool.view(), &labels, eps0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn class_rows(y: &[usize], class: usize) -> Vec<usize> {
    (0..y.len()).filter(|&r| y[r] == class).collect()
}

fn check_batch<T: Scalar>(f: ArrayView2<T>, y: &[usize], dim: usize, classes: usize) -> Result<()> {
    if f.nrows() != y.len() {
        return Err(GrodError::LengthMismatch { left: f.nrows(), right: y.len() });
    }
    if f.ncols() != dim {
        return Err(GrodError::DimensionMismatch { expected: dim, got: f.ncols() });
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(GrodError::InvalidArgument(format!("label {bad} outside 0..{classes}")));
    }
    Ok(())
}

/// `κ = min(|Î|, max(1, ⌊2B/K⌋))` with `Î` the classes holding more than
/// one row; returns `κ` and the top-κ classes by count (ties to the smaller
/// index), sorted ascending.
pub fn select_classes(counts: &[usize], b: usize, k: usize) -> (usize, Vec<usize>) {
    let mut eligible: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 1).collect();
    let cap = (2 * b).checked_div(k).map_or(1, |c| c.max(1));
    let kappa = eligible.len().min(cap);
    eligible.sort_by(|&x, &y| counts[y].cmp(&counts[x]).then(x.cmp(&y)));
    let mut chosen: Vec<usize> = eligible.into_iter().take(kappa).collect();
    chosen.sort_unstable();
    (kappa, chosen)
}

/// EMA step of the global statistics over the whole batch and of the
/// per-class statistics over the classes in `selected`. A selected class
/// with no statistics yet is initialized from its batch rows.
pub fn update_centers<T: Scalar>(
    state: &mut GrodState<T>,
    f: ArrayView2<T>,
    y: &[usize],
    selected: &[usize],
    gamma_opt: T,
    eps0: T,
) -> Result<()> {
    check_batch(f, y, state.dim, state.classes)?;
    let pca = state.pca.as_mut().ok_or(GrodError::UninitializedState)?;
    pca.update(f, gamma_opt, eps0)?;
    for &c in selected {
        let rows = f.select(Axis(0), &class_rows(y, c));
        match &mut state.lda[c] {
            Some(stats) => stats.update(rows.view(), gamma_opt, eps0)?,
            slot @ None => *slot = Some(ClusterStats::fit(rows.view(), eps0)?),
        }
    }
    Ok(())
}

/// Mean squared Mahalanobis distance of the batch to the global centre and
/// of each class's rows to its own centre (`None` for classes without rows
/// or statistics).
pub fn id_reference_distances<T: Scalar>(
    f: ArrayView2<T>,
    y: &[usize],
    state: &GrodState<T>,
) -> Result<(T, Vec<Option<T>>)> {
    let pca = state.pca.as_ref().ok_or(GrodError::UninitializedState)?;
    let global = pca.mean_distance(f)?;
    let mut per_class = Vec::with_capacity(state.classes);
    for (c, stats) in state.lda.iter().enumerate() {
        let rows = class_rows(y, c);
        per_class.push(match stats {
            Some(s) if !rows.is_empty() => Some(s.mean_distance(f.select(Axis(0), &rows).view())?),
            _ => None,
        });
    }
    Ok((global, per_class))
}

/// One OOD centre per boundary point: `u = v + a·(v−μ)/(‖v−μ‖ + ε)`, with
/// `μ` the global centre for PCA points and the class centre for LDA points.
pub fn build_ood_centers<T: Scalar>(
    boundary: &[BoundarySet<T>],
    state: &GrodState<T>,
    a: T,
    eps: T,
) -> Result<Vec<(Array1<T>, BoundarySource)>> {
    let mut out = Vec::new();
    for set in boundary {
        let stats = match set.source {
            BoundarySource::Pca => state.pca.as_ref(),
            BoundarySource::Lda(c) => state.lda.get(c).and_then(|s| s.as_ref()),
        }
        .ok_or(GrodError::UninitializedState)?;
        for v in set.points.rows() {
            out.push((extend(v, stats.mean.view(), a, eps), set.source));
        }
    }
    Ok(out)
}

/// `v + a·(v−μ)/(‖v−μ‖₂ + ε)`.
pub fn extend<T: Scalar>(v: ArrayView1<T>, mu: ArrayView1<T>, a: T, eps: T) -> Array1<T> {
    let dir = &v - &mu;
    let norm = dir.dot(&dir).sqrt();
    &v + &(dir * (a / (norm + eps)))
}

/// Gaussian clouds `N(u, (a/3)·I)` around the OOD centres. Each provenance
/// group (in order of first appearance) gets `num` points, assigned to its
/// centres round-robin.
pub fn sample_fake_ood<T: Scalar>(
    centers: &[(Array1<T>, BoundarySource)],
    a: T,
    num: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<T>, Vec<BoundarySource>)> {
    if centers.is_empty() {
        return Err(GrodError::EmptyInput);
    }
    let dim = centers[0].0.len();
    let mut groups: Vec<(BoundarySource, Vec<usize>)> = Vec::new();
    for (i, (_, src)) in centers.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| g == src) {
            Some((_, members)) => members.push(i),
            None => groups.push((*src, vec![i])),
        }
    }
    let sd = (a / T::lit(3.0)).sqrt();
    let mut points = Array2::zeros((groups.len() * num, dim));
    let mut provenance = Vec::with_capacity(groups.len() * num);
    let mut row = 0;
    for (src, members) in &groups {
        for t in 0..num {
            let centre = &centers[members[t % members.len()]].0;
            for j in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                points[[row, j]] = centre[j] + sd * T::lit(z);
            }
            provenance.push(*src);
            row += 1;
        }
    }
    Ok((points, provenance))
}

/// Distance of a candidate to the ID data: the global distance when no
/// class is selected, else the minimum over the selected classes together
/// with the class attaining it (first on ties).
pub fn ood_distance<T: Scalar>(
    v: ArrayView1<T>,
    state: &GrodState<T>,
    selected: &[usize],
) -> Result<(T, Option<usize>)> {
    let mut best: Option<(T, usize)> = None;
    for &c in selected {
        let stats = state.lda[c].as_ref().ok_or(GrodError::UninitializedState)?;
        let d = stats.distance(v)?;
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, c));
        }
    }
    match best {
        Some((d, c)) => Ok((d, Some(c))),
        None => {
            let pca = state.pca.as_ref().ok_or(GrodError::UninitializedState)?;
            Ok((pca.distance(v)?, None))
        }
    }
}

/// Fake OOD rows retained for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeOodBatch<T> {
    pub points: Array2<T>,
    /// Rows over `K + 1` outputs summing to 1.
    pub soft_labels: Array2<T>,
    pub provenance: Vec<BoundarySource>,
    /// Distance of each point to the ID data and the nearest selected class.
    pub dist_ood: Vec<T>,
    pub nearest: Vec<Option<usize>>,
    /// Reference ID distance each point was compared against.
    pub dist_id: Vec<T>,
    /// `1 + Λ`: every retained point has `dist_ood ≥ scale·dist_id`.
    pub threshold_scale: T,
    pub candidates: usize,
}

/// Points surviving the Mahalanobis filter and the random cap.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered<T> {
    pub points: Array2<T>,
    pub provenance: Vec<BoundarySource>,
    pub dist_ood: Vec<T>,
    pub nearest: Vec<Option<usize>>,
    pub dist_id: Vec<T>,
    pub threshold_scale: T,
    /// λ under which half of the candidates would have been kept.
    pub lambda_median: Option<f64>,
}

/// Retention cap `⌊B/K⌋ + 2`.
pub fn retention_cap(b: usize, k: usize) -> usize {
    b / k.max(1) + 2
}

/// Reference distance for a candidate whose nearest selected class is
/// `nearest`; floored so ratios stay finite on collapsed clusters.
fn reference_distance<T: Scalar>(state: &GrodState<T>, nearest: Option<usize>) -> Result<T> {
    let stats = match nearest {
        Some(c) => state.lda[c].as_ref(),
        None => state.pca.as_ref(),
    }
    .ok_or(GrodError::UninitializedState)?;
    Ok(stats.dist_id.max(T::min_positive_value()))
}

/// Drop candidates with `Dist^OOD < (1+Λ)·Dist^ID`, where
/// `Λ = max(0, λ·(10/N)·Σ(Dist^OOD/Dist^ID − 1))` over all `N` candidates, then keep
/// a uniform random subset of at most `⌊B/K⌋ + 2`.
#[allow(clippy::too_many_arguments)]
pub fn filter_fake_ood<T: Scalar>(
    candidates: ArrayView2<T>,
    provenance: &[BoundarySource],
    state: &GrodState<T>,
    selected: &[usize],
    lambda_filter: f64,
    b: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Filtered<T>> {
    let n = candidates.nrows();
    if n == 0 {
        return Err(GrodError::EmptyInput);
    }
    let mut dist_ood = Vec::with_capacity(n);
    let mut nearest = Vec::with_capacity(n);
    let mut dist_id = Vec::with_capacity(n);
    let mut ratio_sum = T::zero();
    for v in candidates.rows() {
        let (d, c) = ood_distance(v, state, selected)?;
        let r = reference_distance(state, c)?;
        ratio_sum += d / r - T::one();
        dist_ood.push(d);
        nearest.push(c);
        dist_id.push(r);
    }
    let mean_excess = ratio_sum / T::from_usize(n).unwrap();
    // Λ < 0 would let points nearer than the ID reference through
    let big_lambda = (T::lit(lambda_filter * 10.0) * mean_excess).max(T::zero());
    let scale = T::one() + big_lambda;
    let kept: Vec<usize> = (0..n).filter(|&i| dist_ood[i] >= scale * dist_id[i]).collect();

    let lambda_median = {
        let mut ratios: Vec<f64> = (0..n).map(|i| (dist_ood[i] / dist_id[i]).as_f64()).collect();
        ratios.sort_by(f64::total_cmp);
        let median = ratios[(n - 1) / 2];
        let m = mean_excess.as_f64();
        (m > 0.0).then(|| ((median - 1.0) / (10.0 * m)).max(0.0))
    };

    if kept.is_empty() {
        return Err(GrodError::AllFiltered);
    }
    let cap = retention_cap(b, k);
    let chosen: Vec<usize> = if kept.len() > cap {
        let mut pick: Vec<usize> = index::sample(rng, kept.len(), cap).into_iter().map(|i| kept[i]).collect();
        pick.sort_unstable();
        pick
    } else {
        kept
    };
    Ok(Filtered {
        points: candidates.select(Axis(0), &chosen),
        provenance: chosen.iter().map(|&i| provenance[i]).collect(),
        dist_ood: chosen.iter().map(|&i| dist_ood[i]).collect(),
        nearest: chosen.iter().map(|&i| nearest[i]).collect(),
        dist_id: chosen.iter().map(|&i| dist_id[i]).collect(),
        threshold_scale: scale,
        lambda_median,
    })
}

/// Soft labels over `K + 1` outputs:
/// `yⱼ ∝ exp(rⱼ − 1)`, `y_{K+1} ∝ exp(1 − maxⱼ rⱼ)` with
/// `rⱼ = Dist^ID_j / Dist(v, μⱼ, Σⱼ)`, normalized to sum 1. Classes without
/// statistics get zero mass; with none at all the row is one-hot at `K+1`.
pub fn soft_labels<T: Scalar>(points: ArrayView2<T>, state: &GrodState<T>) -> Result<Array2<T>> {
    let k = state.classes;
    let mut out = Array2::zeros((points.nrows(), k + 1));
    let floor = T::min_positive_value();
    for (i, v) in points.rows().into_iter().enumerate() {
        let mut logs: Vec<Option<T>> = vec![None; k + 1];
        let mut max_ratio: Option<T> = None;
        for (c, stats) in state.lda.iter().enumerate() {
            if let Some(s) = stats {
                let r = s.dist_id / s.distance(v)?.max(floor);
                logs[c] = Some(r - T::one());
                max_ratio = Some(max_ratio.map_or(r, |m: T| m.max(r)));
            }
        }
        match max_ratio {
            None => out[[i, k]] = T::one(),
            Some(m) => {
                logs[k] = Some(T::one() - m);
                let top = logs.iter().flatten().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (j, l) in logs.iter().enumerate() {
                    if let Some(l) = l {
                        let e = (*l - top).exp();
                        out[[i, j]] = e;
                        total += e;
                    }
                }
                out.row_mut(i).mapv_inplace(|e| e / total);
            }
        }
    }
    Ok(out)
}

/// Hard one-hot labels at the OOD index.
pub fn hard_ood_labels<T: Scalar>(n: usize, k: usize) -> Array2<T> {
    let mut out = Array2::zeros((n, k + 1));
    out.column_mut(k).fill(T::one());
    out
}

/// Batch after augmentation: ID rows first, then fake OOD rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch<T> {
    pub features: Array2<T>,
    /// Label distributions over `K + 1` outputs.
    pub labels: Array2<T>,
    pub n_id: usize,
    pub fake: Option<FakeOodBatch<T>>,
    pub warmup: bool,
    pub selected: Vec<usize>,
}

impl<T: Scalar> AugmentedBatch<T> {
    pub fn n_fake(&self) -> usize {
        self.features.nrows() - self.n_id
    }

    fn id_only(f: ArrayView2<T>, y: &[usize], k: usize, warmup: bool, selected: Vec<usize>) -> Self {
        let mut labels = Array2::zeros((y.len(), k + 1));
        for (i, &c) in y.iter().enumerate() {
            labels[[i, c]] = T::one();
        }
        AugmentedBatch {
            features: f.to_owned(),
            labels,
            n_id: y.len(),
            fake: None,
            warmup,
            selected,
        }
    }
}

/// Full per-batch pipeline. During warmup the batch is returned unchanged
/// and pooled; the state is initialized from the pool once warmup ends.
pub fn grod_augment_batch<T: Scalar>(
    f: ArrayView2<T>,
    y: &[usize],
    state: &mut GrodState<T>,
    config: &GrodConfig,
    seed: u64,
) -> Result<AugmentedBatch<T>> {
    let k = state.classes;
    check_batch(f, y, state.dim, k)?;
    let eps0 = T::lit(config.eps0);
    state.batch_index += 1;

    if !state.is_initialized() {
        state.pool_features.push(f.to_owned());
        state.pool_labels.extend_from_slice(y);
        if state.batch_index <= config.warmup_batches {
            if state.batch_index == config.warmup_batches {
                state.flush_pool(eps0)?;
            }
            return Ok(AugmentedBatch::id_only(f, y, k, true, Vec::new()));
        }
        // no warmup configured: the first batch seeds the statistics
        state.flush_pool(eps0)?;
    }

    let b = f.nrows();
    if b < 2 {
        return Ok(AugmentedBatch::id_only(f, y, k, false, Vec::new()));
    }
    let counts: Vec<usize> = (0..k).map(|c| y.iter().filter(|&&l| l == c).count()).collect();
    let (kappa, selected) = select_classes(&counts, b, k);
    update_centers(state, f, y, &selected, T::lit(config.gamma_opt), eps0)?;

    let mut boundary = Vec::new();
    let p = config.pca_axes.unwrap_or_else(|| default_pca_axes(state.dim)).min(state.dim).min(b - 1);
    let pca = pca_fit(f, p)?;
    boundary.push(mine_boundary(f, &pca)?);
    if !selected.is_empty() {
        let q = config.lda_axes.unwrap_or_else(|| default_lda_axes(k));
        // too few populated classes for a discriminant: PCA boundary only
        if let Ok(bases) = lda_fit(f, y, q, eps0) {
            for basis in bases.iter().filter(|b| b.class_id.is_some_and(|c| selected.contains(&c))) {
                boundary.push(mine_class_boundary(f, y, basis)?);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = T::lit(config.a);
    let centers = build_ood_centers(&boundary, state, a, T::lit(config.eps))?;
    let num = config.num_for(b, kappa);
    let (candidates, provenance) = sample_fake_ood(&centers, a, num, &mut rng)?;
    let filtered = match filter_fake_ood(
        candidates.view(),
        &provenance,
        state,
        &selected,
        state.lambda_filter,
        b,
        k,
        &mut rng,
    ) {
        Ok(v) => v,
        Err(GrodError::AllFiltered) => return Ok(AugmentedBatch::id_only(f, y, k, false, selected)),
        Err(e) => return Err(e),
    };
    if config.lambda_adapt > 0.0 {
        if let Some(target) = filtered.lambda_median {
            state.lambda_filter = (1.0 - config.lambda_adapt) * state.lambda_filter + config.lambda_adapt * target;
        }
    }

    let soft = if selected.is_empty() {
        hard_ood_labels(filtered.points.nrows(), k)
    } else {
        soft_labels(filtered.points.view(), state)?
    };
    let mut out = AugmentedBatch::id_only(f, y, k, false, selected);
    out.features = ndarray::concatenate(Axis(0), &[f, filtered.points.view()])
        .map_err(|e| GrodError::ShapeMismatch(e.to_string()))?;
    out.labels = ndarray::concatenate(Axis(0), &[out.labels.view(), soft.view()])
        .map_err(|e| GrodError::ShapeMismatch(e.to_string()))?;
    out.fake = Some(FakeOodBatch {
        points: filtered.points,
        soft_labels: soft,
        provenance: filtered.provenance,
        dist_ood: filtered.dist_ood,
        nearest: filtered.nearest,
        dist_id: filtered.dist_id,
        threshold_scale: filtered.threshold_scale,
        candidates: candidates.nrows(),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projections::BoundarySet;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn blobs(seed: u64, per_class: usize, centres: &[[f64; 2]]) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = per_class * centres.len();
        let mut f = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for (c, centre) in centres.iter().enumerate() {
            for i in 0..per_class {
                for j in 0..2 {
                    f[[c * per_class + i, j]] = centre[j] + rng.sample::<f64, _>(StandardNormal);
                }
                y.push(c);
            }
        }
        (f, y)
    }

    fn ready_state(f: &Array2<f64>, y: &[usize], k: usize) -> GrodState<f64> {
        let mut s = GrodState::new(k, f.ncols(), &GrodConfig::default());
        s.initialize(f.view(), y, 1e-4).unwrap();
        s
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(select_classes(&[7; 10], 64, 10), (10, (0..10).collect()));
        assert_eq!(select_classes(&[1, 0, 1], 8, 3), (0, vec![]));
        let mut counts = vec![0; 100];
        counts[4] = 2;
        counts[9] = 3;
        counts[50] = 3;
        assert_eq!(select_classes(&counts, 4, 100), (1, vec![9]));
    }

    #[test]
    fn ema_examples() {
        assert_abs_diff_eq!(ema(0.0, 1.0, 0.1), 0.1, epsilon = 1e-15);
        assert_eq!(ema(3.7, 1.25, 1.0), 1.25);
    }

    #[test]
    fn constant_batches_reach_fixed_point() {
        let (f0, y0) = blobs(1, 20, &[[0.0, 0.0], [5.0, 5.0]]);
        let (f1, y1) = blobs(2, 20, &[[1.0, -1.0], [4.0, 6.0]]);
        let mut s = ready_state(&f0, &y0, 2);
        for _ in 0..300 {
            update_centers(&mut s, f1.view(), &y1, &[0, 1], 0.1, 1e-4).unwrap();
        }
        let target = column_mean(f1.view()).unwrap();
        let pca = s.pca.as_ref().unwrap();
        for (a, b) in pca.mean.iter().zip(target.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
        let batch_cov = covariance_or_ridge(f1.view(), 1e-4);
        for (a, b) in pca.cov.iter().zip(batch_cov.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn full_replacement_with_unit_rate() {
        let (f0, y0) = blobs(3, 10, &[[0.0, 0.0], [5.0, 5.0]]);
        let (f1, y1) = blobs(4, 10, &[[1.0, 1.0], [2.0, 2.0]]);
        let mut s = ready_state(&f0, &y0, 2);
        update_centers(&mut s, f1.view(), &y1, &[1], 1.0, 1e-4).unwrap();
        let rows: Vec<usize> = class_rows(&y1, 1);
        let m = column_mean(f1.select(Axis(0), &rows).view()).unwrap();
        assert_eq!(s.lda[1].as_ref().unwrap().mean, m);
        assert_eq!(s.pca.as_ref().unwrap().mean, column_mean(f1.view()).unwrap());
    }

    #[test]
    fn uninitialized_state_is_rejected() {
        let mut s = GrodState::<f64>::new(2, 2, &GrodConfig::default());
        let f = array![[0.0, 0.0], [1.0, 1.0]];
        let err = update_centers(&mut s, f.view(), &[0, 1], &[], 0.1, 1e-4).unwrap_err();
        assert!(matches!(err, GrodError::UninitializedState));
    }

    #[test]
    fn extension_examples() {
        let u = extend(array![2.0, 0.0].view(), array![0.0, 0.0].view(), 0.1, 1e-7);
        assert_abs_diff_eq!(u[0], 2.1, epsilon = 1e-6);
        assert_eq!(u[1], 0.0);
        let v = array![0.3, -0.4];
        assert_eq!(extend(v.view(), v.view(), 0.1, 1e-7), v);
    }

    #[test]
    fn centres_follow_their_provenance() {
        let (f, y) = blobs(5, 30, &[[0.0, 0.0], [4.0, 0.0]]);
        let s = ready_state(&f, &y, 2);
        let sets = vec![
            BoundarySet { points: f.select(Axis(0), &[0, 1]), rows: vec![0, 1], source: BoundarySource::Pca },
            BoundarySet { points: f.select(Axis(0), &[40]), rows: vec![40], source: BoundarySource::Lda(1) },
        ];
        let centres = build_ood_centers(&sets, &s, 0.5, 1e-7).unwrap();
        assert_eq!(centres.len(), 3);
        let mu1 = &s.lda[1].as_ref().unwrap().mean;
        let expect = extend(f.row(40), mu1.view(), 0.5, 1e-7);
        assert_eq!(centres[2].0, expect);
        for ((u, _), v) in centres.iter().zip([f.row(0), f.row(1), f.row(40)]) {
            let d = (u - &v).mapv(|x| x * x).sum().sqrt();
            assert!(d <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn fake_ood_variance_is_a_over_three() {
        let centres = vec![(array![1.0, -2.0], BoundarySource::Pca)];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, prov) = sample_fake_ood(&centres, 0.3, 20_000, &mut rng).unwrap();
        assert_eq!(prov.len(), 20_000);
        for j in 0..2 {
            let col = x.column(j);
            let m = col.mean().unwrap();
            let var = col.mapv(|v| (v - m) * (v - m)).sum() / (col.len() - 1) as f64;
            // sd of the sample variance is 0.1·√(2/n) ≈ 0.001
            assert!((var - 0.1).abs() < 0.005, "var {var}");
        }
    }

    #[test]
    fn fake_ood_round_robin_and_determinism() {
        let centres = vec![
            (array![0.0, 0.0], BoundarySource::Pca),
            (array![10.0, 0.0], BoundarySource::Lda(0)),
            (array![0.0, 10.0], BoundarySource::Pca),
        ];
        let draw = |seed| sample_fake_ood(&centres, 0.003, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (x, prov) = draw(1);
        assert_eq!(x.nrows(), 8);
        assert_eq!(&prov[..4], &[BoundarySource::Pca; 4]);
        assert_eq!(&prov[4..], &[BoundarySource::Lda(0); 4]);
        // PCA group alternates between its two centres
        assert!(x[[0, 1]] < 1.0 && x[[1, 1]] > 9.0 && x[[2, 1]] < 1.0 && x[[3, 1]] > 9.0);
        assert_eq!(draw(1), (x, prov));
        let (one, _) = sample_fake_ood(&centres[..1], 0.3, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(one.nrows(), 1);
    }

    #[test]
    fn reference_distance_examples() {
        let f = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let s = ready_state(&f, &[0, 0, 1], 2);
        let (g, per) = id_reference_distances(f.view(), &[0, 0, 1], &s).unwrap();
        assert_eq!(g, 0.0);
        assert_eq!(per[0], Some(0.0));
        // class 1 has a single row, hence no statistics
        assert_eq!(per[1], None);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let z = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let y = vec![0; n];
        let mut st = GrodState::<f64>::new(1, 2, &GrodConfig::default());
        st.initialize(z.view(), &y, 1e-4).unwrap();
        let (g, per) = id_reference_distances(z.view(), &y, &st).unwrap();
        // mean of χ²₂ with the sample covariance: exactly 2(n−1)/n up to eps0
        assert!((g - 2.0).abs() < 0.01, "{g}");
        assert_abs_diff_eq!(per[0].unwrap(), g, epsilon = 1e-12);
    }

    #[test]
    fn class_restricted_reference_uses_class_rows() {
        let (f, y) = blobs(8, 25, &[[0.0, 0.0], [6.0, 1.0]]);
        let s = ready_state(&f, &y, 2);
        let (_, per) = id_reference_distances(f.view(), &y, &s).unwrap();
        let rows = class_rows(&y, 1);
        let stats = s.lda[1].as_ref().unwrap();
        let manual: f64 =
            rows.iter().map(|&r| stats.distance(f.row(r)).unwrap()).sum::<f64>() / rows.len() as f64;
        assert_abs_diff_eq!(per[1].unwrap(), manual, epsilon = 1e-12);
    }

    #[test]
    fn ood_distance_branches() {
        let (f, y) = blobs(9, 30, &[[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]]);
        let s = ready_state(&f, &y, 3);
        let v = array![1.0, 1.0];
        let (d, c) = ood_distance(v.view(), &s, &[]).unwrap();
        assert_eq!(c, None);
        assert_eq!(d, s.pca.as_ref().unwrap().distance(v.view()).unwrap());

        let centre = s.lda[1].as_ref().unwrap().mean.clone();
        let (d, c) = ood_distance(centre.view(), &s, &[0, 1]).unwrap();
        assert_eq!((d, c), (0.0, Some(1)));

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let v = array![rng.random_range(-3.0..8.0), rng.random_range(-3.0..8.0)];
            let (d, c) = ood_distance(v.view(), &s, &[0, 1, 2]).unwrap();
            let brute: Vec<f64> = (0..3).map(|k| s.lda[k].as_ref().unwrap().distance(v.view()).unwrap()).collect();
            let (arg, min) = brute.iter().enumerate().fold((0, f64::MAX), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
            assert_eq!(d, min);
            assert_eq!(c, Some(arg));
        }
    }

    #[test]
    fn filter_examples() {
        let (f, y) = blobs(11, 40, &[[0.0, 0.0], [6.0, 0.0]]);
        let s = ready_state(&f, &y, 2);
        let centre = s.lda[0].as_ref().unwrap().mean.clone();
        let far = array![40.0, 40.0];
        let cands = ndarray::stack(Axis(0), &[centre.view(), far.view()]).unwrap();
        let prov = [BoundarySource::Pca; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = filter_fake_ood(cands.view(), &prov, &s, &[0, 1], 0.1, 32, 2, &mut rng).unwrap();
        assert_eq!(out.points.nrows(), 1);
        assert_eq!(out.points.row(0), far.view());

        let at_centre = centre.clone().insert_axis(Axis(0));
        let err = filter_fake_ood(at_centre.view(), &prov[..1], &s, &[0, 1], 0.1, 32, 2, &mut rng).unwrap_err();
        assert!(matches!(err, GrodError::AllFiltered));

        let many = Array2::from_shape_fn((100, 2), |(i, j)| 50.0 + i as f64 * 0.5 + j as f64);
        let prov = vec![BoundarySource::Pca; 100];
        let out = filter_fake_ood(many.view(), &prov, &s, &[0, 1], 0.0, 32, 10, &mut rng).unwrap();
        assert_eq!(out.points.nrows(), 5);
    }

    #[test]
    fn soft_label_examples() {
        let (f, y) = blobs(12, 40, &[[0.0, 0.0], [3.0, 0.0]]);
        let s = ready_state(&f, &y, 2);
        let far = array![[1e6, -1e6]];
        let l = soft_labels(far.view(), &s).unwrap();
        // ratios → 0: raw (e⁻¹, e⁻¹, e), normalized
        let z = 2.0 * (-1f64).exp() + 1f64.exp();
        assert_abs_diff_eq!(l[[0, 2]], 1f64.exp() / z, epsilon = 1e-6);
        assert_abs_diff_eq!(l[[0, 0]], (-1f64).exp() / z, epsilon = 1e-6);

        // hand-built state where every ratio is exactly 1
        let mut s1 = s.clone();
        let v = array![0.5, 0.5];
        for st in s1.lda.iter_mut().flatten() {
            st.dist_id = st.distance(v.view()).unwrap();
        }
        let l = soft_labels(v.clone().insert_axis(Axis(0)).view(), &s1).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(l[[0, j]], 1.0 / 3.0, epsilon = 1e-12);
        }

        let near = array![[0.1, 0.2], [2.9, -0.1], [1.5, 4.0]];
        let l = soft_labels(near.view(), &s).unwrap();
        for row in l.rows() {
            assert!(row.iter().all(|&x| x > 0.0));
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn soft_labels_without_class_statistics_are_hard() {
        let f = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let s = ready_state(&f, &[0, 1, 2], 3);
        let l = soft_labels(array![[5.0, 5.0]].view(), &s).unwrap();
        assert_eq!(l, array![[0.0, 0.0, 0.0, 1.0]]);
    }

    #[test]
    fn warmup_passes_batches_through() {
        let config = GrodConfig { warmup_batches: 2, ..GrodConfig::default() };
        let (f, y) = blobs(13, 16, &[[0.0, 0.0], [4.0, 4.0]]);
        let mut s = GrodState::new(2, 2, &config);
        for i in 0..2 {
            let out = grod_augment_batch(f.view(), &y, &mut s, &config, i).unwrap();
            assert!(out.warmup);
            assert_eq!(out.features, f);
            assert_eq!(out.n_fake(), 0);
        }
        assert!(s.is_initialized());
        let out = grod_augment_batch(f.view(), &y, &mut s, &config, 3).unwrap();
        assert!(!out.warmup);
        assert!(out.features.nrows() <= 32 + 18);
        assert_eq!(out.features.slice(ndarray::s![..32, ..]), f.view());
        for row in out.labels.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        for (i, &c) in y.iter().enumerate() {
            assert_eq!(out.labels[[i, c]], 1.0);
            assert_eq!(out.labels[[i, 2]], 0.0);
        }
    }

    #[test]
    fn singleton_classes_run_pca_only_with_hard_labels() {
        let config = GrodConfig { warmup_batches: 1, ..GrodConfig::default() };
        let (f, _) = blobs(14, 6, &[[0.0, 0.0]]);
        let y = vec![0, 1, 2, 3, 4, 5];
        let mut s = GrodState::new(6, 2, &config);
        grod_augment_batch(f.view(), &y, &mut s, &config, 0).unwrap();
        let out = grod_augment_batch(f.view(), &y, &mut s, &config, 1).unwrap();
        assert!(out.selected.is_empty());
        if let Some(fake) = &out.fake {
            assert!(fake.provenance.iter().all(|&p| p == BoundarySource::Pca));
            assert!(fake.nearest.iter().all(|c| c.is_none()));
            for row in fake.soft_labels.rows() {
                assert_eq!(row[6], 1.0);
            }
        }
    }

    #[test]
    fn augmentation_is_deterministic_and_snapshot_round_trips() {
        let config = GrodConfig { warmup_batches: 1, ..GrodConfig::default() };
        let (f, y) = blobs(15, 16, &[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]);
        let mut s = GrodState::new(3, 2, &config);
        grod_augment_batch(f.view(), &y, &mut s, &config, 0).unwrap();
        let json = s.to_json().unwrap();
        let mut restored = GrodState::<f64>::from_json(&json).unwrap();
        assert_eq!(restored, s);
        let a = grod_augment_batch(f.view(), &y, &mut s, &config, 42).unwrap();
        let b = grod_augment_batch(f.view(), &y, &mut restored, &config, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(s, restored);
    }

    #[test]
    fn config_validation() {
        assert!(GrodConfig::default().validate().is_ok());
        assert!(GrodConfig { a: 0.0, ..GrodConfig::default() }.validate().is_err());
        assert!(GrodConfig { gamma: 1.5, ..GrodConfig::default() }.validate().is_err());
        assert!(GrodConfig { gamma_opt: 0.0, ..GrodConfig::default() }.validate().is_err());
        assert_eq!(GrodConfig::default().num_for(64, 10), 8);
        assert_eq!(GrodConfig::default().num_for(64, 1), 32);
    }
}
