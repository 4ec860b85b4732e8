//! Dense linear algebra used by the filter, projections and scorers.
//!
//! Everything here is a pure function over `ndarray` views. Matrices are
//! small (feature dimension at most a few hundred), so the routines favour
//! clarity and determinism over blocking or SIMD.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{GrodError, Result};
use crate::scalar::Scalar;

pub type RealMatrix<T> = Array2<T>;
pub type RealVector<T> = Array1<T>;

/// Default Tikhonov term added before factorizing a covariance.
pub const DEFAULT_EPS0: f64 = 1e-4;

/// `(m + mᵀ) / 2`.
pub fn symmetrize<T: Scalar>(m: ArrayView2<T>) -> Array2<T> {
    let half = T::lit(0.5);
    let t = m.t();
    Array2::from_shape_fn(m.raw_dim(), |(i, j)| (m[[i, j]] + t[[i, j]]) * half)
}

/// Lower-triangular Cholesky factor `L` with `m = L·Lᵀ`.
pub fn cholesky<T: Scalar>(m: ArrayView2<T>) -> Result<Array2<T>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(GrodError::ShapeMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    let mut l = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut acc = m[[i, j]];
            for k in 0..j {
                acc -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(acc > T::zero()) || !acc.is_finite() {
                    return Err(GrodError::NotPositiveDefinite { pivot: i });
                }
                l[[i, i]] = acc.sqrt();
            } else {
                l[[i, j]] = acc / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub fn lower_triangular_inverse<T: Scalar>(l: ArrayView2<T>) -> Array2<T> {
    let n = l.nrows();
    let mut inv = Array2::<T>::zeros((n, n));
    for j in 0..n {
        inv[[j, j]] = l[[j, j]].recip();
        for i in (j + 1)..n {
            let mut acc = T::zero();
            for k in j..i {
                acc += l[[i, k]] * inv[[k, j]];
            }
            inv[[i, j]] = -acc / l[[i, i]];
        }
    }
    inv
}

/// `(Σ + eps0·I)⁻¹` through `Σ' = L·Lᵀ`, `Σ'⁻¹ = (L⁻¹)ᵀ·L⁻¹`.
///
/// The input is symmetrized first; the result is exactly symmetric.
pub fn regularized_inverse<T: Scalar>(sigma: ArrayView2<T>, eps0: T) -> Result<Array2<T>> {
    if sigma.nrows() != sigma.ncols() {
        return Err(GrodError::ShapeMismatch(format!(
            "covariance must be square, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let mut reg = symmetrize(sigma);
    for i in 0..reg.nrows() {
        reg[[i, i]] += eps0;
    }
    let l = cholesky(reg.view())?;
    let l_inv = lower_triangular_inverse(l.view());
    let inv = l_inv.t().dot(&l_inv);
    Ok(symmetrize(inv.view()))
}

/// Squared Mahalanobis form `(x−μ)·Σ⁻¹·(x−μ)ᵀ`, no square root.
pub fn mahalanobis_sq<T: Scalar>(
    x: ArrayView1<T>,
    mu: ArrayView1<T>,
    sigma_inv: ArrayView2<T>,
) -> Result<T> {
    let d = mu.len();
    if x.len() != d {
        return Err(GrodError::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    if sigma_inv.nrows() != d || sigma_inv.ncols() != d {
        return Err(GrodError::DimensionMismatch {
            expected: d,
            got: sigma_inv.nrows(),
        });
    }
    let diff = &x - &mu;
    let q = diff.dot(&sigma_inv.dot(&diff));
    // rounding can push a PD form fractionally below zero
    Ok(q.max(T::zero()))
}

/// Column means of an `n×s` matrix.
pub fn column_mean<T: Scalar>(f: ArrayView2<T>) -> Result<Array1<T>> {
    if f.nrows() == 0 {
        return Err(GrodError::EmptyInput);
    }
    let n = T::from_usize(f.nrows()).unwrap();
    Ok(f.sum_axis(Axis(0)).mapv(|v| v / n))
}

/// Unbiased (`n−1`) sample covariance of the rows of `f`.
pub fn sample_covariance<T: Scalar>(f: ArrayView2<T>) -> Result<Array2<T>> {
    let n = f.nrows();
    if n < 2 {
        return Err(GrodError::TooFewSamples { needed: 2, got: n });
    }
    let mean = column_mean(f)?;
    let centered = &f - &mean.view().insert_axis(Axis(0));
    let denom = T::from_usize(n - 1).unwrap();
    let cov = centered.t().dot(&centered).mapv(|v| v / denom);
    Ok(symmetrize(cov.view()))
}

/// Sample covariance, or `eps0·I` when fewer than two rows are available.
pub fn covariance_or_ridge<T: Scalar>(f: ArrayView2<T>, eps0: T) -> Array2<T> {
    match sample_covariance(f) {
        Ok(c) => c,
        Err(_) => Array2::from_diag_elem(f.ncols(), eps0),
    }
}

/// Column-wise softmax with per-column max subtraction.
pub fn column_softmax<T: Scalar>(m: ArrayView2<T>) -> Array2<T> {
    let mut out = m.to_owned();
    for mut col in out.columns_mut() {
        let max = col.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - max).exp());
        let sum: T = col.iter().copied().sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

/// Softmax of a single vector.
pub fn softmax<T: Scalar>(v: ArrayView1<T>) -> Array1<T> {
    let max = v.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e = v.mapv(|x| (x - max).exp());
    let s: T = e.iter().copied().sum();
    e.mapv(|x| x / s)
}

/// `log Σ exp(v)` stabilized by the maximum.
pub fn log_sum_exp<T: Scalar>(v: ArrayView1<T>) -> T {
    let max = v.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if !max.is_finite() {
        return max;
    }
    let s: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as columns. Each eigenvector is oriented so that its first
/// component with magnitude above `1e-12` is positive.
pub fn symmetric_eigen<T: Scalar>(m: ArrayView2<T>) -> Result<(Array1<T>, Array2<T>)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(GrodError::ShapeMismatch(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    let mut a = symmetrize(m);
    let mut v = Array2::<T>::eye(n);
    let tol = T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..n {
            diag += a[[i, i]] * a[[i, i]];
            for j in (i + 1)..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off <= tol * tol * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = (t * t + T::one()).sqrt().recip();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps index order for equal eigenvalues
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap_or(std::cmp::Ordering::Equal));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vectors = Array2::<T>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).to_owned();
        orient(&mut col);
        vectors.column_mut(dst).assign(&col);
    }
    Ok((values, vectors))
}

/// Flip `v` so its first non-negligible component is positive.
pub fn orient<T: Scalar>(v: &mut Array1<T>) {
    let tiny = T::lit(1e-12);
    if let Some(&first) = v.iter().find(|c| c.abs() > tiny) {
        if first < T::zero() {
            v.mapv_inplace(|c| -c);
        }
    }
}

/// Infinity norm of `a·b − I`.
pub fn identity_residual<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> T {
    let prod = a.dot(&b);
    let mut worst = T::zero();
    for ((i, j), &v) in prod.indexed_iter() {
        let target = if i == j { T::one() } else { T::zero() };
        worst = worst.max((v - target).abs());
    }
    worst
}
