//! PCA / per-class LDA projections and boundary-sample mining.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GrodError, Result};
use crate::numerics::{
    cholesky, column_mean, lower_triangular_inverse, orient, sample_covariance, symmetric_eigen,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionKind {
    Pca,
    Lda,
}

/// Projection axes stored as rows (`p × s`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis<T> {
    pub kind: ProjectionKind,
    pub axes: Array2<T>,
    pub mean: Array1<T>,
    /// Class the basis is restricted to (LDA only, 0-based).
    pub class_id: Option<usize>,
    /// Eigenvalue attached to each axis.
    pub spectrum: Array1<T>,
}

impl<T: Scalar> ProjectionBasis<T> {
    pub fn dim(&self) -> usize {
        self.axes.ncols()
    }

    pub fn n_axes(&self) -> usize {
        self.axes.nrows()
    }

    /// Coordinates of every row of `f` along each axis (`n × p`).
    pub fn project(&self, f: ArrayView2<T>) -> Array2<T> {
        let centered = &f - &self.mean.view().insert_axis(Axis(0));
        centered.dot(&self.axes.t())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundarySource {
    Pca,
    Lda(usize),
}

/// Boundary samples; every point is a row of the mined batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySet<T> {
    pub points: Array2<T>,
    /// Row indices into the matrix handed to [`mine_boundary`].
    pub rows: Vec<usize>,
    pub source: BoundarySource,
}

impl<T> BoundarySet<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Default PCA axis count: `min(s, 8)`.
pub fn default_pca_axes(s: usize) -> usize {
    s.min(8)
}

/// Default LDA axis count: `min(K−1, 4)`.
pub fn default_lda_axes(k: usize) -> usize {
    k.saturating_sub(1).clamp(1, 4)
}

/// Top-`p` principal axes of the sample covariance, descending eigenvalue.
pub fn pca_fit<T: Scalar>(f: ArrayView2<T>, p: usize) -> Result<ProjectionBasis<T>> {
    let (n, s) = f.dim();
    if n < 2 {
        return Err(GrodError::TooFewSamples { needed: 2, got: n });
    }
    if p == 0 || p > s.min(n - 1) {
        return Err(GrodError::InvalidArgument(format!(
            "pca axis count {p} outside 1..={}",
            s.min(n - 1)
        )));
    }
    let cov = sample_covariance(f)?;
    let (values, vectors) = symmetric_eigen(cov.view())?;
    let axes = vectors.slice(ndarray::s![.., ..p]).t().to_owned();
    Ok(ProjectionBasis {
        kind: ProjectionKind::Pca,
        axes,
        mean: column_mean(f)?,
        class_id: None,
        spectrum: values.slice(ndarray::s![..p]).to_owned(),
    })
}

/// Fisher discriminant axes, one basis per class that has ≥ 2 rows.
///
/// Classes with a single row are ignored. The within-class scatter gets
/// `eps0·I` before whitening; `p` is clamped to `classes − 1`, the rank of
/// the between-class scatter. Labels are 0-based.
pub fn lda_fit<T: Scalar>(
    f: ArrayView2<T>,
    y: &[usize],
    p: usize,
    eps0: T,
) -> Result<Vec<ProjectionBasis<T>>> {
    let (n, s) = f.dim();
    if y.len() != n {
        return Err(GrodError::LengthMismatch { left: n, right: y.len() });
    }
    let n_classes = y.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (row, &label) in y.iter().enumerate() {
        members[label].push(row);
    }
    let used: Vec<usize> = (0..n_classes).filter(|&c| members[c].len() >= 2).collect();
    if used.len() < 2 {
        return Err(GrodError::TooFewSamples { needed: 2, got: used.len() });
    }
    if p == 0 {
        return Err(GrodError::InvalidArgument("lda axis count must be ≥ 1".into()));
    }
    let p = p.min(used.len() - 1).min(s);

    let rows_used: Vec<usize> = used.iter().flat_map(|&c| members[c].iter().copied()).collect();
    let global = column_mean(f.select(Axis(0), &rows_used).view())?;
    let mut within = Array2::<T>::zeros((s, s));
    let mut between = Array2::<T>::zeros((s, s));
    let mut class_means = Vec::with_capacity(used.len());
    for &c in &used {
        let block = f.select(Axis(0), &members[c]);
        let mu = column_mean(block.view())?;
        let centered = &block - &mu.view().insert_axis(Axis(0));
        within = within + centered.t().dot(&centered);
        let d = (&mu - &global).insert_axis(Axis(1));
        let nc = T::from_usize(members[c].len()).unwrap();
        between = between + d.dot(&d.t()).mapv(|v| v * nc);
        class_means.push(mu);
    }
    for i in 0..s {
        within[[i, i]] += eps0;
    }
    let l = cholesky(within.view()).map_err(|_| GrodError::DegenerateScatter)?;
    let l_inv = lower_triangular_inverse(l.view());
    let whitened = l_inv.dot(&between).dot(&l_inv.t());
    let (values, vectors) = symmetric_eigen(whitened.view())?;
    let mut axes = Array2::<T>::zeros((p, s));
    for j in 0..p {
        let mut w = l_inv.t().dot(&vectors.column(j));
        let norm = w.dot(&w).sqrt();
        if !(norm > T::zero()) {
            return Err(GrodError::DegenerateScatter);
        }
        w.mapv_inplace(|v| v / norm);
        orient(&mut w);
        axes.row_mut(j).assign(&w);
    }
    let spectrum = values.slice(ndarray::s![..p]).to_owned();
    Ok(used
        .iter()
        .zip(class_means)
        .map(|(&c, mean)| ProjectionBasis {
            kind: ProjectionKind::Lda,
            axes: axes.clone(),
            mean,
            class_id: Some(c),
            spectrum: spectrum.clone(),
        })
        .collect())
}

/// Rows of `f` attaining the max and min coordinate along each axis.
///
/// Ties go to the lowest row index. The returned rows are sorted and
/// deduplicated; they are copies of input rows, never reconstructions.
pub fn mine_boundary<T: Scalar>(
    f: ArrayView2<T>,
    basis: &ProjectionBasis<T>,
) -> Result<BoundarySet<T>> {
    if f.nrows() == 0 {
        return Err(GrodError::EmptyInput);
    }
    if f.ncols() != basis.dim() {
        return Err(GrodError::DimensionMismatch {
            expected: basis.dim(),
            got: f.ncols(),
        });
    }
    let proj = basis.project(f);
    let mut rows = Vec::with_capacity(2 * basis.n_axes());
    for col in proj.columns() {
        let (mut arg_max, mut arg_min) = (0, 0);
        for (i, &v) in col.iter().enumerate() {
            if v > col[arg_max] {
                arg_max = i;
            }
            if v < col[arg_min] {
                arg_min = i;
            }
        }
        rows.push(arg_max);
        rows.push(arg_min);
    }
    rows.sort_unstable();
    rows.dedup();
    let source = match (basis.kind, basis.class_id) {
        (ProjectionKind::Lda, Some(c)) => BoundarySource::Lda(c),
        _ => BoundarySource::Pca,
    };
    Ok(BoundarySet {
        points: f.select(Axis(0), &rows),
        rows,
        source,
    })
}

/// [`mine_boundary`] on the rows of `f` labelled with the basis class.
pub fn mine_class_boundary<T: Scalar>(
    f: ArrayView2<T>,
    y: &[usize],
    basis: &ProjectionBasis<T>,
) -> Result<BoundarySet<T>> {
    let class = basis.class_id.ok_or_else(|| {
        GrodError::InvalidArgument("class boundary needs an LDA basis".into())
    })?;
    let members: Vec<usize> = (0..f.nrows()).filter(|&r| y[r] == class).collect();
    let restricted = f.select(Axis(0), &members);
    let mut set = mine_boundary(restricted.view(), basis)?;
    set.rows = set.rows.iter().map(|&r| members[r]).collect();
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn pca_axis_on_line() {
        let f = array![[-2.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        let b = pca_fit(f.view(), 1).unwrap();
        assert_abs_diff_eq!(b.axes[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.axes[[0, 1]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pca_diagonal_axis() {
        let f = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let b = pca_fit(f.view(), 1).unwrap();
        let r = 0.5f64.sqrt();
        assert_abs_diff_eq!(b.axes[[0, 0]], r, epsilon = 1e-12);
        assert_abs_diff_eq!(b.axes[[0, 1]], r, epsilon = 1e-12);
    }

    #[test]
    fn pca_isotropic_spectrum() {
        let f = array![[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]];
        let b = pca_fit(f.view(), 2).unwrap();
        assert_abs_diff_eq!(b.spectrum[0], b.spectrum[1], epsilon = 1e-12);
        let gram = b.axes.dot(&b.axes.t());
        assert_abs_diff_eq!(gram[[0, 1]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gram[[0, 0]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pca_rejects_bad_arguments() {
        let f = array![[1.0, 2.0]];
        assert!(matches!(pca_fit(f.view(), 1), Err(GrodError::TooFewSamples { .. })));
        let f = array![[1.0, 2.0], [2.0, 1.0], [0.0, 0.0]];
        assert!(pca_fit(f.view(), 3).is_err());
        assert!(pca_fit(f.view(), 0).is_err());
    }

    #[test]
    fn lda_separates_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (c, cx) in [(0usize, 0.0), (1, 10.0)] {
            for _ in 0..200 {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                rows.extend([cx + a, b]);
                y.push(c);
            }
        }
        let f = Array2::from_shape_vec((400, 2), rows).unwrap();
        let bases = lda_fit(f.view(), &y, 1, 1e-4).unwrap();
        assert_eq!(bases.len(), 2);
        let ax = bases[0].axes.row(0);
        assert!(ax[0].abs() > 0.99, "axis {ax:?}");
        assert_eq!(bases[1].class_id, Some(1));
    }

    #[test]
    fn lda_one_dimensional() {
        let f = array![[0.0], [0.5], [9.0], [10.0]];
        let bases = lda_fit(f.view(), &[0, 0, 1, 1], 1, 1e-4).unwrap();
        assert_eq!(bases[0].axes, array![[1.0]]);
    }

    #[test]
    fn lda_collinear_centres() {
        // centres along (1,1)/√2 with isotropic within-class spread
        let mut f = Vec::new();
        let mut y = Vec::new();
        for c in 0..3usize {
            let base = 4.0 * c as f64;
            for (dx, dy) in [(-0.5, 0.0), (0.5, 0.0), (0.0, -0.5), (0.0, 0.5)] {
                f.extend([base + dx, base + dy]);
                y.push(c);
            }
        }
        let f = Array2::from_shape_vec((12, 2), f).unwrap();
        let bases = lda_fit(f.view(), &y, 2, 1e-4).unwrap();
        let ax = bases[0].axes.row(0);
        let r = 0.5f64.sqrt();
        assert_abs_diff_eq!(ax[0], r, epsilon = 1e-6);
        assert_abs_diff_eq!(ax[1], r, epsilon = 1e-6);
    }

    #[test]
    fn lda_needs_two_classes() {
        let f = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]];
        assert!(lda_fit(f.view(), &[0, 0, 1], 1, 1e-4).is_err());
    }

    #[test]
    fn boundary_axis_extremes() {
        let f = array![[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]];
        let b = pca_fit(f.view(), 2).unwrap();
        let set = mine_boundary(f.view(), &b).unwrap();
        assert_eq!(set.rows, vec![0, 1, 2, 3]);
        assert_eq!(set.points, f);
    }

    #[test]
    fn boundary_single_axis() {
        let f = array![[0.0, 0.1], [5.0, 0.0], [1.0, -0.1], [-4.0, 0.0], [2.0, 0.05]];
        let b = pca_fit(f.view(), 1).unwrap();
        let set = mine_boundary(f.view(), &b).unwrap();
        assert_eq!(set.rows, vec![1, 3]);
    }

    #[test]
    fn boundary_matches_exhaustive_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = Array2::from_shape_fn((50, 3), |_| rng.random_range(-1.0..1.0));
        let b = pca_fit(f.view(), 3).unwrap();
        let set = mine_boundary(f.view(), &b).unwrap();
        let mut expected = Vec::new();
        for j in 0..3 {
            let coords: Vec<f64> = (0..50)
                .map(|r| (0..3).map(|c| (f[[r, c]] - b.mean[c]) * b.axes[[j, c]]).sum())
                .collect();
            let max = coords.iter().cloned().fold(f64::MIN, f64::max);
            let min = coords.iter().cloned().fold(f64::MAX, f64::min);
            expected.push(coords.iter().position(|&v| v == max).unwrap());
            expected.push(coords.iter().position(|&v| v == min).unwrap());
        }
        expected.sort_unstable();
        expected.dedup();
        assert_eq!(set.rows, expected);
        for (k, &r) in set.rows.iter().enumerate() {
            assert_eq!(set.points.row(k), f.row(r));
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let b = ProjectionBasis {
            kind: ProjectionKind::Pca,
            axes: array![[1.0, 0.0]],
            mean: array![0.0, 0.0],
            class_id: None,
            spectrum: array![1.0],
        };
        let f = Array2::<f64>::zeros((0, 2));
        assert!(matches!(mine_boundary(f.view(), &b), Err(GrodError::EmptyInput)));
    }

    #[test]
    fn class_boundary_maps_back_to_batch_rows() {
        let f = array![[0.0, 0.0], [9.0, 0.0], [1.0, 0.0], [10.0, 0.5], [-1.0, 0.2], [11.0, 0.0]];
        let y = [0, 1, 0, 1, 0, 1];
        let bases = lda_fit(f.view(), &y, 1, 1e-4).unwrap();
        let set = mine_class_boundary(f.view(), &y, &bases[1]).unwrap();
        assert_eq!(set.source, BoundarySource::Lda(1));
        assert!(set.rows.iter().all(|&r| y[r] == 1));
        for (k, &r) in set.rows.iter().enumerate() {
            assert_eq!(set.points.row(k), f.row(r));
        }
    }
}
