//! Dense linear-algebra and HAC inference primitives shared across the
//! estimation modules.
//!
//! Everything here is deterministic: QR-based least squares, symmetric
//! eigendecompositions with a fixed descending order, and Bartlett-kernel
//! long-run variance estimators. Higher-level modules own the statistical
//! conventions; this module owns the numerics.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative tolerance on the R diagonal below which a design matrix is
/// treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("design matrix is rank deficient (condition estimate {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error("need at least {required} observations, got {actual}")]
    InsufficientData { required: usize, actual: usize },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

/// Ordinary least squares fit of `y` on the columns of `x`.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    /// `(X'X)^-1`, kept for covariance assembly.
    pub xtx_inv: DMatrix<f64>,
    pub n_obs: usize,
    pub n_params: usize,
    /// Total sum of squares of `y` around its mean.
    pub tss: f64,
    /// Residual sum of squares.
    pub rss: f64,
}

impl OlsFit {
    /// Coefficient of determination against a mean-only benchmark.
    pub fn r_squared(&self) -> f64 {
        if self.tss > 0.0 {
            1.0 - self.rss / self.tss
        } else {
            f64::NAN
        }
    }

    /// Degrees-of-freedom adjusted R^2; `n_params` counts the intercept
    /// column when one is present in the design.
    pub fn adj_r_squared(&self) -> f64 {
        let n = self.n_obs as f64;
        let k = self.n_params as f64;
        if self.n_obs > self.n_params {
            1.0 - (1.0 - self.r_squared()) * (n - 1.0) / (n - k)
        } else {
            f64::NAN
        }
    }

    /// Homoskedastic OLS covariance of the coefficients, `s^2 (X'X)^-1`.
    pub fn ols_covariance(&self) -> DMatrix<f64> {
        let dof = (self.n_obs - self.n_params).max(1) as f64;
        &self.xtx_inv * (self.rss / dof)
    }
}

/// Least squares via thin QR. Fails if the design is rank deficient at
/// relative tolerance `1e-10` on the R diagonal.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit, LinalgError> {
    let n = x.nrows();
    let k = x.ncols();
    if y.len() != n {
        return Err(LinalgError::DimensionMismatch {
            context: format!("{} rows in X vs {} in y", n, y.len()),
        });
    }
    if n < k {
        return Err(LinalgError::InsufficientData {
            required: k,
            actual: n,
        });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let mut max_diag = 0.0f64;
    let mut min_diag = f64::INFINITY;
    for i in 0..k {
        let d = r[(i, i)].abs();
        max_diag = max_diag.max(d);
        min_diag = min_diag.min(d);
    }
    if !(min_diag > RANK_TOL * max_diag) || max_diag == 0.0 {
        let condition = if min_diag > 0.0 {
            max_diag / min_diag
        } else {
            f64::INFINITY
        };
        return Err(LinalgError::RankDeficient { condition });
    }
    let q = qr.q();
    let qty = q.transpose() * y;
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or(LinalgError::RankDeficient {
            condition: max_diag / min_diag,
        })?;
    // (X'X)^-1 = R^-1 R^-T from the triangular factor.
    let identity = DMatrix::<f64>::identity(k, k);
    let r_inv = r
        .solve_upper_triangular(&identity)
        .ok_or(LinalgError::RankDeficient {
            condition: max_diag / min_diag,
        })?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let fitted = x * &coefficients;
    let residuals = y - &fitted;
    let mean_y = y.mean();
    let tss = y.iter().map(|v| (v - mean_y).powi(2)).sum();
    let rss = residuals.iter().map(|v| v * v).sum();
    Ok(OlsFit {
        coefficients,
        fitted,
        residuals,
        xtx_inv,
        n_obs: n,
        n_params: k,
        tss,
        rss,
    })
}

/// OLS that greedily drops (near-)collinear columns, keeping earlier columns
/// in preference to later ones. Returns the fit over the kept columns plus
/// the kept and dropped column indices.
pub fn ols_drop_collinear(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    rel_tol: f64,
) -> Result<(OlsFit, Vec<usize>, Vec<usize>), LinalgError> {
    let n = x.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..x.ncols() {
        let col = DVector::from_column_slice(x.column(j).as_slice());
        let norm0 = col.norm();
        let mut v = col;
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        // A second re-orthogonalization pass keeps the basis clean.
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= rel_tol * norm0 || basis.len() >= n {
            dropped.push(j);
        } else {
            basis.push(v / norm);
            kept.push(j);
        }
    }
    if kept.is_empty() {
        return Err(LinalgError::RankDeficient {
            condition: f64::INFINITY,
        });
    }
    let sub = x.select_columns(kept.iter());
    let fit = ols(&sub, y)?;
    Ok((fit, kept, dropped))
}

/// Eigenvalues (descending) and matching eigenvectors of a symmetric matrix.
/// Ties are broken by the original eigenvalue index, so the ordering is
/// deterministic.
pub fn symmetric_eigen_desc(s: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = s.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Top-k principal structure of a data matrix with rows as observations.
///
/// Works on the smaller Gram matrix of `x` (columns-by-columns or
/// rows-by-rows, whichever is cheaper) and returns
/// `(eigenvalues, scores, loadings)` where `scores = x * loadings`,
/// loadings have orthonormal columns, and the eigenvalues are those of
/// `x' x` in descending order.
pub fn top_principal_components(
    x: &DMatrix<f64>,
    k: usize,
) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (t, n) = (x.nrows(), x.ncols());
    let k = k.min(n).min(t);
    if n <= t {
        let gram = x.tr_mul(x);
        let (values, vectors) = symmetric_eigen_desc(&gram);
        let loadings = DMatrix::from_fn(n, k, |i, j| vectors[(i, j)]);
        let scores = x * &loadings;
        (values.into_iter().take(k).collect(), scores, loadings)
    } else {
        let gram = x * x.transpose();
        let (values, vectors) = symmetric_eigen_desc(&gram);
        let mut loadings = DMatrix::<f64>::zeros(n, k);
        let mut scores = DMatrix::<f64>::zeros(t, k);
        for j in 0..k {
            let lambda = values[j].max(0.0);
            let sigma = lambda.sqrt();
            let u = vectors.column(j);
            if sigma > 0.0 {
                let v = (x.transpose() * u) / sigma;
                loadings.set_column(j, &v);
                scores.set_column(j, &(u * sigma));
            }
        }
        (values.into_iter().take(k).collect(), scores, loadings)
    }
}

/// Bartlett-kernel long-run variance of a series, per observation:
///
/// ```text
/// lrv = g_0 + 2 * sum_{j=1..L} (1 - j/(L+1)) * g_j
/// g_j = (1/T) * sum_{t=j..T-1} e_t * e_{t-j},  e = series - mean(series)
/// ```
///
/// With `lags = 0` this collapses to the population variance of the series.
/// The variance of the sample mean is `lrv / T`.
pub fn newey_west_long_run_variance(series: &[f64], lags: usize) -> f64 {
    let t = series.len();
    if t == 0 {
        return f64::NAN;
    }
    let mean = series.iter().sum::<f64>() / t as f64;
    let e: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let tf = t as f64;
    let gamma = |j: usize| -> f64 { (j..t).map(|i| e[i] * e[i - j]).sum::<f64>() / tf };
    let mut lrv = gamma(0);
    let max_lag = lags.min(t.saturating_sub(1));
    for j in 1..=max_lag {
        let w = 1.0 - j as f64 / (lags as f64 + 1.0);
        lrv += 2.0 * w * gamma(j);
    }
    lrv
}

/// Mean of `series` and its HAC t-statistic with Bartlett weights.
pub fn hac_mean_t(series: &[f64], lags: usize) -> (f64, f64) {
    let t = series.len();
    if t == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = series.iter().sum::<f64>() / t as f64;
    let lrv = newey_west_long_run_variance(series, lags);
    let se = (lrv / t as f64).sqrt();
    (mean, mean / se)
}

/// HAC (Bartlett) covariance of OLS coefficients:
/// `V = (X'X)^-1 * S * (X'X)^-1` with `S` the weighted sum of score
/// autocovariances, scores `s_t = x_t * e_t`.
pub fn hac_ols_covariance(
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    xtx_inv: &DMatrix<f64>,
    lags: usize,
) -> DMatrix<f64> {
    let t = x.nrows();
    let k = x.ncols();
    let mut scores = DMatrix::<f64>::zeros(t, k);
    for i in 0..t {
        let e = residuals[i];
        for j in 0..k {
            scores[(i, j)] = x[(i, j)] * e;
        }
    }
    let mut s = DMatrix::<f64>::zeros(k, k);
    for i in 0..t {
        let row = scores.row(i);
        s += row.transpose() * row;
    }
    let max_lag = lags.min(t.saturating_sub(1));
    for j in 1..=max_lag {
        let w = 1.0 - j as f64 / (lags as f64 + 1.0);
        let mut gamma = DMatrix::<f64>::zeros(k, k);
        for i in j..t {
            let a = scores.row(i);
            let b = scores.row(i - j);
            gamma += a.transpose() * b;
        }
        s += (&gamma + gamma.transpose()) * w;
    }
    xtx_inv * s * xtx_inv
}

/// Arithmetic mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n - 1 denominator).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)
}

/// Unbiased sample standard deviation.
pub fn sample_std(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Unbiased sample covariance of two equal-length slices.
pub fn sample_covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 || n != b.len() {
        return f64::NAN;
    }
    let ma = mean(a);
    let mb = mean(b);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n as f64 - 1.0)
}

/// Pearson correlation; NaN when either series is degenerate.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let cov = sample_covariance(a, b);
    let sa = sample_std(a);
    let sb = sample_std(b);
    if sa > 0.0 && sb > 0.0 {
        cov / (sa * sb)
    } else {
        f64::NAN
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_design() -> (DMatrix<f64>, DVector<f64>) {
        // Fixed small regression problem with a known normal-equation answer.
        let x = DMatrix::from_row_slice(
            6,
            3,
            &[
                1.0, 0.2, -1.1, //
                1.0, -0.4, 0.3, //
                1.0, 1.5, 0.7, //
                1.0, 0.9, -0.2, //
                1.0, -1.2, 0.5, //
                1.0, 0.3, 1.9,
            ],
        );
        let y = DVector::from_row_slice(&[0.5, -0.1, 2.1, 1.2, -1.4, 1.0]);
        (x, y)
    }

    #[test]
    fn ols_matches_normal_equations() {
        let (x, y) = toy_design();
        let fit = ols(&x, &y).unwrap();
        // Brute-force solve of (X'X) b = X'y through explicit inversion.
        let xtx = x.tr_mul(&x);
        let xty = x.tr_mul(&y);
        let b = xtx.clone().try_inverse().unwrap() * xty;
        for i in 0..3 {
            assert_relative_eq!(fit.coefficients[i], b[i], max_relative = 1e-10);
        }
        let resid_dot_x = x.tr_mul(&fit.residuals);
        for i in 0..3 {
            assert!(resid_dot_x[i].abs() < 1e-10);
        }
    }

    #[test]
    fn ols_rejects_rank_deficient_design() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            ols(&x, &y),
            Err(LinalgError::RankDeficient { .. })
        ));
    }

    #[test]
    fn drop_collinear_keeps_earlier_columns() {
        let (x, y) = toy_design();
        // Append an exact copy of column 1: it must be the column dropped.
        let mut wide = DMatrix::<f64>::zeros(6, 4);
        for j in 0..3 {
            wide.set_column(j, &x.column(j));
        }
        wide.set_column(3, &x.column(1));
        let (fit, kept, dropped) = ols_drop_collinear(&wide, &y, 1e-8).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
        assert_eq!(dropped, vec![3]);
        let base = ols(&x, &y).unwrap();
        for i in 0..3 {
            assert_relative_eq!(fit.coefficients[i], base.coefficients[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn eigen_desc_orders_and_reconstructs() {
        let s = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let (values, vectors) = symmetric_eigen_desc(&s);
        assert!(values[0] >= values[1] && values[1] >= values[2]);
        let lambda = DMatrix::from_diagonal(&DVector::from_row_slice(&values));
        let recon = &vectors * lambda * vectors.transpose();
        assert_relative_eq!((recon - s).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn principal_components_agree_across_gram_sides() {
        // Wide and tall orientations of the same data must give the same
        // leading eigenvalue and matching scores up to sign.
        let x = DMatrix::from_fn(8, 5, |i, j| ((i * 7 + j * 3) % 11) as f64 / 3.0 - 1.5);
        let (vals_a, scores_a, _) = top_principal_components(&x, 2);
        let xt = x.transpose();
        let (vals_b, _, loadings_b) = top_principal_components(&xt, 2);
        // Scores of x are loadings of x' scaled by the singular value.
        for j in 0..2 {
            assert_relative_eq!(vals_a[j], vals_b[j], max_relative = 1e-9);
            let sa = scores_a.column(j).normalize();
            let lb = loadings_b.column(j).clone_owned();
            let dot = sa.dot(&lb).abs();
            assert_relative_eq!(dot, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn newey_west_zero_lag_is_population_variance() {
        let xs = [0.3, -0.2, 0.9, 1.4, -0.8, 0.1];
        let m = mean(&xs);
        let pop_var = xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / xs.len() as f64;
        assert_relative_eq!(
            newey_west_long_run_variance(&xs, 0),
            pop_var,
            epsilon = 1e-14
        );
    }

    #[test]
    fn newey_west_matches_double_sum() {
        // Brute-force Bartlett double sum over all |t - s| <= L pairs.
        let xs: Vec<f64> = (0..40)
            .map(|i| ((i * 2654435761u64 % 1000) as f64 / 500.0 - 1.0) + (i as f64 * 0.01))
            .collect();
        let lags = 5usize;
        let t = xs.len();
        let m = mean(&xs);
        let e: Vec<f64> = xs.iter().map(|v| v - m).collect();
        let mut brute = 0.0;
        for a in 0..t {
            for b in 0..t {
                let d = a.abs_diff(b);
                if d <= lags {
                    let w = 1.0 - d as f64 / (lags as f64 + 1.0);
                    brute += w * e[a] * e[b];
                }
            }
        }
        brute /= t as f64;
        assert_relative_eq!(
            newey_west_long_run_variance(&xs, lags),
            brute,
            epsilon = 1e-12
        );
    }

    #[test]
    fn hac_ols_covariance_zero_lag_matches_white() {
        let (x, y) = toy_design();
        let fit = ols(&x, &y).unwrap();
        let v = hac_ols_covariance(&x, &fit.residuals, &fit.xtx_inv, 0);
        // White covariance by explicit assembly.
        let mut meat = DMatrix::<f64>::zeros(3, 3);
        for i in 0..6 {
            let r = x.row(i).transpose() * fit.residuals[i];
            meat += &r * r.transpose();
        }
        let white = &fit.xtx_inv * meat * &fit.xtx_inv;
        assert_relative_eq!((v - white).norm(), 0.0, epsilon = 1e-12);
    }
}
